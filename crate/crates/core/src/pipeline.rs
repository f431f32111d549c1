//! The match, export and evaluate stages as library calls.
//!
//! Each stage reads the previous stage's files, so stages can be re-run
//! independently. Matching isolates failures per pair: a bad pyramid or a
//! missing level marks its pairs as failed and the run continues.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::archive::{ArchiveError, ImageInfo, MatchArchive, PairRecord};
use crate::config::{ConfigError, PipelineConfig};
use crate::eval::{evaluate_poses, read_name_list, read_poses, EvalError, EvaluationReport};
use crate::export::{write_feature_and_match_files, ExportError, ExportManifest};
use crate::matching::{coarse_to_fine_match_normalized, mutual_nn_match_normalized, MatchError, NormalizedLevel};
use crate::pyramid::{image_id_from_path, load_pyramid, PyramidError, FILE_EXTENSION};
use crate::relocalize::{relocalize_matches_with, RelocalizeError, Relocalizer};
use crate::verify::{multi_homography_ransac, rank_pairs, VerifyError};

pub const ARCHIVE_FILE: &str = "matches.dmar";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ERRORS_FILE: &str = "night_errors.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const COUNTS_FILE: &str = "counts.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Relocalize(#[from] RelocalizeError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a pair list: one `image_a image_b` pair per line, `#` comments.
pub fn read_pair_list(path: &Path) -> Result<Vec<(String, String)>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [a, b] if a != b => pairs.push((a.to_string(), b.to_string())),
            _ => {
                return Err(PipelineError::Usage(format!(
                    "{}:{}: expected two distinct image names",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok(pairs)
}

/// Sorted `.dpyr` files in a directory.
pub fn list_pyramids(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == FILE_EXTENSION))
        .collect();
    files.sort();
    Ok(files)
}

/// Stable per-pair seed, so results do not depend on scheduling.
pub fn pair_seed(base: u64, image_a: &str, image_b: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in image_a.bytes().chain([0u8]).chain(image_b.bytes()) {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ base.rotate_left(32)
}

struct PreparedImage {
    info: ImageInfo,
    coarse: NormalizedLevel,
    fine: NormalizedLevel,
    relocalizer: Relocalizer,
}

fn prepare(path: &Path, config: &PipelineConfig) -> Result<PreparedImage, PipelineError> {
    let pyramid = load_pyramid(path)?;
    Ok(PreparedImage {
        info: ImageInfo {
            name: pyramid.image_id().to_string(),
            width: pyramid.image_width(),
            height: pyramid.image_height(),
        },
        coarse: NormalizedLevel::from_level(pyramid.level_by_name(&config.coarse_level)?),
        fine: NormalizedLevel::from_level(pyramid.level_by_name(&config.fine_level)?),
        relocalizer: Relocalizer::new(&pyramid, config.k_window)?,
    })
}

fn match_pair(a: &PreparedImage, b: &PreparedImage, config: &PipelineConfig) -> Result<PairRecord, PipelineError> {
    let coarse = mutual_nn_match_normalized(&a.coarse, &b.coarse)?;
    let fine = coarse_to_fine_match_normalized(&coarse, &a.fine, &b.fine)?;
    let correspondences = relocalize_matches_with(&fine, &a.relocalizer, &b.relocalizer)?;
    let verified = multi_homography_ransac(
        &a.info.name,
        &b.info.name,
        correspondences,
        &config.verification_params(),
        pair_seed(config.rng_seed, &a.info.name, &b.info.name),
    )?;
    Ok(PairRecord {
        image_a: a.info.clone(),
        image_b: b.info.clone(),
        level: fine.level,
        tentative_count: fine.matches.len(),
        verified,
    })
}

#[derive(Debug, Clone, Default)]
pub struct MatchOptions {
    /// Overrides `config.pair_list`.
    pub pairs: Option<PathBuf>,
    /// Worker threads; `None` uses rayon's default.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFailure {
    pub image_a: String,
    pub image_b: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct MatchOutcome {
    pub archive: MatchArchive,
    pub failures: Vec<PairFailure>,
    pub archive_path: PathBuf,
    pub summary_path: PathBuf,
}

impl MatchOutcome {
    pub fn is_success(&self) -> bool {
        self.failures.is_empty()
    }
}

enum PairResult {
    Done(Box<PairRecord>),
    Failed(PairFailure),
}

/// Matches and verifies every requested pair of the pyramids in
/// `pyramid_dir`, writing the archive and a summary table to `out_dir`.
pub fn cmd_match(
    pyramid_dir: &Path,
    config: &PipelineConfig,
    options: &MatchOptions,
    out_dir: &Path,
) -> Result<MatchOutcome, PipelineError> {
    config.validate()?;
    let files = list_pyramids(pyramid_dir)?;
    if files.len() < 2 {
        return Err(PipelineError::Usage(format!(
            "{} holds {} pyramid file(s); matching needs at least 2",
            pyramid_dir.display(),
            files.len()
        )));
    }
    let ids: Vec<String> = files.iter().map(|p| image_id_from_path(p)).collect();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    let pairs: Vec<(usize, usize)> = match options.pairs.as_ref().or(config.pair_list.as_ref()) {
        Some(list) => read_pair_list(list)?
            .iter()
            .map(|(a, b)| match (index.get(a.as_str()), index.get(b.as_str())) {
                (Some(&i), Some(&j)) => Ok((i, j)),
                _ => Err(PipelineError::Usage(format!("pair {a} {b} names an image with no pyramid"))),
            })
            .collect::<Result<_, _>>()?,
        None => (0..ids.len()).flat_map(|i| (i + 1..ids.len()).map(move |j| (i, j))).collect(),
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.unwrap_or(0))
        .build()
        .map_err(|e| PipelineError::Usage(format!("thread pool: {e}")))?;

    let results: Vec<PairResult> = pool.install(|| {
        let prepared: Vec<Result<PreparedImage, String>> =
            files.par_iter().map(|p| prepare(p, config).map_err(|e| e.to_string())).collect();
        pairs
            .par_iter()
            .map(|&(i, j)| {
                let fail = |reason: String| {
                    PairResult::Failed(PairFailure {
                        image_a: ids[i].clone(),
                        image_b: ids[j].clone(),
                        reason,
                    })
                };
                match (&prepared[i], &prepared[j]) {
                    (Ok(a), Ok(b)) => match match_pair(a, b, config) {
                        Ok(r) => PairResult::Done(Box::new(r)),
                        Err(e) => fail(e.to_string()),
                    },
                    (Err(e), _) => fail(format!("{}: {e}", ids[i])),
                    (_, Err(e)) => fail(format!("{}: {e}", ids[j])),
                }
            })
            .collect()
    });

    let mut archive = MatchArchive::default();
    let mut failures = Vec::new();
    let mut summary = String::from("image_a,image_b,tentative,verified,models,status\n");
    for result in results {
        match result {
            PairResult::Done(r) => {
                let _ = writeln!(
                    summary,
                    "{},{},{},{},{},ok",
                    r.image_a.name,
                    r.image_b.name,
                    r.tentative_count,
                    r.verified.total_inliers,
                    r.verified.models.len()
                );
                archive.records.push(*r);
            }
            PairResult::Failed(f) => {
                let reason = f.reason.replace([',', '\n'], ";");
                let _ = writeln!(summary, "{},{},,,,error: {reason}", f.image_a, f.image_b);
                failures.push(f);
            }
        }
    }

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let archive_path = out_dir.join(ARCHIVE_FILE);
    archive.save(&archive_path)?;
    let summary_path = out_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, summary).map_err(io_err(&summary_path))?;
    Ok(MatchOutcome {
        archive,
        failures,
        archive_path,
        summary_path,
    })
}

/// Applies best-N retention when configured, then writes the export files.
pub fn cmd_export(archive_path: &Path, config: &PipelineConfig, out_dir: &Path) -> Result<ExportManifest, PipelineError> {
    config.validate()?;
    let archive = MatchArchive::load(archive_path)?;
    let mut sizes = BTreeMap::new();
    for r in &archive.records {
        for info in [&r.image_a, &r.image_b] {
            sizes.insert(info.name.clone(), (info.width, info.height));
        }
    }
    let pairs: Vec<_> = archive.records.into_iter().map(|r| r.verified).collect();
    let kept = match config.best_n_pairs {
        Some(n) => {
            let retained = rank_pairs(&pairs, n)?.retained;
            pairs
                .into_iter()
                .enumerate()
                .filter(|(i, _)| retained.contains(i))
                .map(|(_, p)| p)
                .collect()
        }
        None => pairs,
    };
    Ok(write_feature_and_match_files(&kept, &sizes, config, out_dir)?)
}

#[derive(Debug, Clone)]
pub struct EvaluateInputs<'a> {
    pub estimated_poses: &'a Path,
    pub reference_poses: &'a Path,
    pub registration_list: &'a Path,
    pub target_list: &'a Path,
    pub position_thresholds: &'a [f64],
    pub angle_threshold_deg: f64,
}

/// Registers the estimate onto the reference and writes the error table,
/// the threshold sweep and the reconstruction counts as CSV.
pub fn cmd_evaluate(inputs: &EvaluateInputs<'_>, out_dir: &Path) -> Result<EvaluationReport, PipelineError> {
    let open = |p: &Path| File::open(p).map(BufReader::new).map_err(io_err(p));
    let estimated = read_poses(open(inputs.estimated_poses)?)?;
    let reference = read_poses(open(inputs.reference_poses)?)?;
    let registration = read_name_list(open(inputs.registration_list)?)?;
    let targets = read_name_list(open(inputs.target_list)?)?;
    let report = evaluate_poses(
        &estimated,
        &reference,
        &registration,
        &targets,
        inputs.position_thresholds,
        inputs.angle_threshold_deg,
    )?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (name, text) in [
        (ERRORS_FILE, report.errors_csv()),
        (SWEEP_FILE, report.sweep_csv()),
        (COUNTS_FILE, report.counts_csv()),
    ] {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(report)
}
