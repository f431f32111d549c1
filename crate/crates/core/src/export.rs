//! Text export of verified matches for an incremental SfM backend.
//!
//! Layout of an export directory:
//!
//! * `<image>.txt`: `N 128` header, then `u v 1.0 0.0` per keypoint. Dense
//!   grid features carry no scale or orientation, so those columns are
//!   placeholders.
//! * `matches.txt`: per image pair, a line `imageA imageB`, then one
//!   `idA idB` line per match, then a blank line.
//! * `pairs.txt`: one `imageA imageB` line per exported pair.
//! * `config.json`: the pipeline parameters, including the fixed-intrinsics
//!   flag.
//!
//! Coordinates are written with two decimals. Keypoints of an image that
//! agree on that 1/100 px grid share one id.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::pyramid::ImageCoord;
use crate::verify::VerifiedPair;

pub const MATCHES_FILE: &str = "matches.txt";
pub const PAIRS_FILE: &str = "pairs.txt";
pub const CONFIG_FILE: &str = "config.json";
/// Descriptor length announced in feature file headers.
pub const DESCRIPTOR_DIM: usize = 128;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("image `{image}`: keypoint ({u}, {v}) outside {width}x{height}")]
    OutOfBounds {
        image: String,
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("image `{0}` has no known size")]
    UnknownImage(String),
    #[error("match references keypoint {id} but image `{image}` has {count}")]
    DanglingIndex { image: String, id: usize, count: usize },
    #[error("malformed export file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageFeatureFile {
    pub image: String,
    /// Keypoint positions, index = keypoint id.
    pub keypoints: Vec<ImageCoord>,
}

fn grid_key(c: ImageCoord) -> (i64, i64) {
    ((c.u * 100.0).round() as i64, (c.v * 100.0).round() as i64)
}

/// Merges coordinates that coincide on the 1/100 px grid. Returns the
/// feature file (ids in order of first appearance) and, for every input
/// coordinate, its keypoint id.
pub fn dedupe_keypoints(
    image: impl Into<String>,
    coords: impl IntoIterator<Item = ImageCoord>,
) -> (ImageFeatureFile, Vec<usize>) {
    let mut ids: HashMap<(i64, i64), usize> = HashMap::new();
    let mut file = ImageFeatureFile {
        image: image.into(),
        keypoints: Vec::new(),
    };
    let remap = coords
        .into_iter()
        .map(|c| {
            let key = grid_key(c);
            *ids.entry(key).or_insert_with(|| {
                file.keypoints
                    .push(ImageCoord::new(key.0 as f64 / 100.0, key.1 as f64 / 100.0));
                file.keypoints.len() - 1
            })
        })
        .collect();
    (file, remap)
}

/// Match lists of one exported image pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchFileEntry {
    pub image_a: String,
    pub image_b: String,
    /// Sorted, without duplicates.
    pub matches: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExportManifest {
    pub feature_files: Vec<PathBuf>,
    pub matches_file: PathBuf,
    pub pairs_file: PathBuf,
    pub config_file: PathBuf,
    pub keypoint_counts: BTreeMap<String, usize>,
    pub match_count: usize,
}

/// In-memory form of an export, before it is written.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExportGraph {
    pub features: Vec<ImageFeatureFile>,
    pub matches: Vec<MatchFileEntry>,
    pub pairs: Vec<(String, String)>,
}

/// Builds feature and match tables from verified pairs: images in
/// lexicographic order, keypoints by first appearance over pairs sorted by
/// name, matches sorted by id.
pub fn build_export_graph(
    pairs: &[VerifiedPair],
    image_sizes: &BTreeMap<String, (u32, u32)>,
) -> Result<ExportGraph, ExportError> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&x, &y| {
        (&pairs[x].image_a, &pairs[x].image_b)
            .cmp(&(&pairs[y].image_a, &pairs[y].image_b))
            .then(x.cmp(&y))
    });

    // Per image, every coordinate in traversal order; per pair, where its
    // two sides start in those lists.
    let mut coords: BTreeMap<&str, Vec<ImageCoord>> = BTreeMap::new();
    let mut spans = Vec::with_capacity(order.len());
    for &p in &order {
        let pair = &pairs[p];
        let inliers = pair.inlier_correspondences();
        for (image, side) in [(&pair.image_a, 0), (&pair.image_b, 1)] {
            let (w, h) = *image_sizes
                .get(image)
                .ok_or_else(|| ExportError::UnknownImage(image.clone()))?;
            for c in inliers.iter().map(|m| if side == 0 { m.0 } else { m.1 }) {
                if !(c.u >= 0.0 && c.v >= 0.0 && c.u < w as f64 && c.v < h as f64) {
                    return Err(ExportError::OutOfBounds {
                        image: image.clone(),
                        u: c.u,
                        v: c.v,
                        width: w,
                        height: h,
                    });
                }
            }
        }
        let start_a = coords.entry(&pair.image_a).or_default().len();
        coords.get_mut(pair.image_a.as_str()).unwrap().extend(inliers.iter().map(|m| m.0));
        let start_b = coords.entry(&pair.image_b).or_default().len();
        coords.get_mut(pair.image_b.as_str()).unwrap().extend(inliers.iter().map(|m| m.1));
        spans.push((p, start_a, start_b, inliers.len()));
    }

    let mut remaps: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut features = Vec::new();
    for (image, list) in coords {
        let (file, remap) = dedupe_keypoints(image, list);
        features.push(file);
        remaps.insert(image, remap);
    }

    let mut matches = Vec::new();
    let mut pair_names = Vec::new();
    for (p, start_a, start_b, count) in spans {
        let pair = &pairs[p];
        pair_names.push((pair.image_a.clone(), pair.image_b.clone()));
        let ra = &remaps[pair.image_a.as_str()];
        let rb = &remaps[pair.image_b.as_str()];
        let mut ids: Vec<(usize, usize)> = (0..count).map(|k| (ra[start_a + k], rb[start_b + k])).collect();
        ids.sort_unstable();
        ids.dedup();
        if !ids.is_empty() {
            matches.push(MatchFileEntry {
                image_a: pair.image_a.clone(),
                image_b: pair.image_b.clone(),
                matches: ids,
            });
        }
    }

    Ok(ExportGraph {
        features,
        matches,
        pairs: pair_names,
    })
}

pub fn feature_file_text(file: &ImageFeatureFile) -> String {
    let mut out = format!("{} {}\n", file.keypoints.len(), DESCRIPTOR_DIM);
    for k in &file.keypoints {
        let _ = writeln!(out, "{:.2} {:.2} 1.0 0.0", k.u, k.v);
    }
    out
}

pub fn matches_file_text(entries: &[MatchFileEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(out, "{} {}", e.image_a, e.image_b);
        for (a, b) in &e.matches {
            let _ = writeln!(out, "{a} {b}");
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct ExportConfigRecord<'a> {
    fixed_intrinsics: bool,
    pipeline: &'a PipelineConfig,
}

/// Writes the export directory and returns what was written.
pub fn write_feature_and_match_files(
    pairs: &[VerifiedPair],
    image_sizes: &BTreeMap<String, (u32, u32)>,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<ExportManifest, ExportError> {
    let graph = build_export_graph(pairs, image_sizes)?;
    let counts: HashMap<&str, usize> = graph
        .features
        .iter()
        .map(|f| (f.image.as_str(), f.keypoints.len()))
        .collect();
    for entry in &graph.matches {
        for (image, id) in entry
            .matches
            .iter()
            .flat_map(|&(a, b)| [(&entry.image_a, a), (&entry.image_b, b)])
        {
            let count = counts.get(image.as_str()).copied().unwrap_or(0);
            if id >= count {
                return Err(ExportError::DanglingIndex {
                    image: image.clone(),
                    id,
                    count,
                });
            }
        }
    }

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut manifest = ExportManifest::default();
    for f in &graph.features {
        let path = out_dir.join(format!("{}.txt", f.image));
        fs::write(&path, feature_file_text(f)).map_err(io_err(&path))?;
        manifest.keypoint_counts.insert(f.image.clone(), f.keypoints.len());
        manifest.feature_files.push(path);
    }

    manifest.matches_file = out_dir.join(MATCHES_FILE);
    fs::write(&manifest.matches_file, matches_file_text(&graph.matches)).map_err(io_err(&manifest.matches_file))?;
    manifest.match_count = graph.matches.iter().map(|e| e.matches.len()).sum();

    manifest.pairs_file = out_dir.join(PAIRS_FILE);
    let mut pairs_text = String::new();
    for (a, b) in &graph.pairs {
        let _ = writeln!(pairs_text, "{a} {b}");
    }
    fs::write(&manifest.pairs_file, pairs_text).map_err(io_err(&manifest.pairs_file))?;

    manifest.config_file = out_dir.join(CONFIG_FILE);
    let record = ExportConfigRecord {
        fixed_intrinsics: config.fixed_intrinsics,
        pipeline: config,
    };
    let json = serde_json::to_string_pretty(&record).expect("config serializes") + "\n";
    fs::write(&manifest.config_file, json).map_err(io_err(&manifest.config_file))?;

    Ok(manifest)
}

/// Summary of a re-read export directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExportCheck {
    pub images: usize,
    pub keypoints: usize,
    pub pairs: usize,
    pub matches: usize,
}

/// Re-reads an export directory and checks that every match index resolves
/// to a keypoint line of the right feature file.
pub fn check_export(dir: &Path) -> Result<ExportCheck, ExportError> {
    let malformed = |path: &Path, reason: String| ExportError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let matches_path = dir.join(MATCHES_FILE);
    let text = fs::read_to_string(&matches_path).map_err(io_err(&matches_path))?;

    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut keypoint_count = |image: &str| -> Result<usize, ExportError> {
        if let Some(&n) = counts.get(image) {
            return Ok(n);
        }
        let path = dir.join(format!("{image}.txt"));
        let body = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut lines = body.lines();
        let header = lines.next().ok_or_else(|| malformed(&path, "empty file".into()))?;
        let n: usize = header
            .split_whitespace()
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| malformed(&path, format!("bad header {header:?}")))?;
        let rows = lines.filter(|l| !l.trim().is_empty()).count();
        if rows != n {
            return Err(malformed(&path, format!("header says {n} keypoints, found {rows}")));
        }
        counts.insert(image.to_string(), n);
        Ok(n)
    };

    let mut check = ExportCheck::default();
    let mut current: Option<(String, String, usize, usize)> = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            current = None;
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(malformed(&matches_path, format!("line {}: {line:?}", lineno + 1)));
        }
        match &current {
            None => {
                let (a, b) = (fields[0].to_string(), fields[1].to_string());
                let na = keypoint_count(&a)?;
                let nb = keypoint_count(&b)?;
                current = Some((a, b, na, nb));
                check.pairs += 1;
            }
            Some((a, b, na, nb)) => {
                let parse = |t: &str| {
                    t.parse::<usize>()
                        .map_err(|_| malformed(&matches_path, format!("line {}: {line:?}", lineno + 1)))
                };
                let (ia, ib) = (parse(fields[0])?, parse(fields[1])?);
                if ia >= *na {
                    return Err(ExportError::DanglingIndex {
                        image: a.clone(),
                        id: ia,
                        count: *na,
                    });
                }
                if ib >= *nb {
                    return Err(ExportError::DanglingIndex {
                        image: b.clone(),
                        id: ib,
                        count: *nb,
                    });
                }
                check.matches += 1;
            }
        }
    }
    check.images = counts.len();
    check.keypoints = counts.values().sum();
    Ok(check)
}
