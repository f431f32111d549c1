//! Tentative matching between two pyramids.
//!
//! Matching runs on L2-normalized copies of the descriptors. The coarse
//! layer is matched exhaustively with a mutual nearest-neighbor check and
//! no ratio test; each coarse match is then refined one level down by
//! matching only among the child cells of its two endpoints.
//!
//! All argmin ties resolve to the lowest row-major cell index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pyramid::{CellCoord, FeatureLevel, PyramidError};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("descriptor channel mismatch: {a} vs {b}")]
    ChannelMismatch { a: usize, b: usize },
    #[error("level `{0}` has no cells")]
    EmptyLevel(String),
    #[error("stride chain violation: fine stride {fine} is not half of coarse stride {coarse}")]
    StrideChain { coarse: u32, fine: u32 },
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TentativeMatch {
    pub cell_a: CellCoord,
    pub cell_b: CellCoord,
    /// L2 distance between the normalized descriptors.
    pub distance: f64,
}

/// Correspondences on one level; every cell appears at most once per side.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchSet {
    pub image_a: String,
    pub image_b: String,
    pub level: String,
    pub stride: u32,
    pub matches: Vec<TentativeMatch>,
}

impl MatchSet {
    pub fn with_images(mut self, image_a: impl Into<String>, image_b: impl Into<String>) -> Self {
        self.image_a = image_a.into();
        self.image_b = image_b.into();
        self
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Euclidean distance between two descriptors.
pub fn match_distance(a: &[f32], b: &[f32]) -> Result<f64, MatchError> {
    if a.len() != b.len() {
        return Err(MatchError::ChannelMismatch { a: a.len(), b: b.len() });
    }
    Ok(squared_distance(a, b).sqrt())
}

#[inline]
pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Unit-length copy of a level's descriptors. All-zero descriptors stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLevel {
    name: String,
    stride: u32,
    width: u32,
    height: u32,
    channels: usize,
    data: Vec<f32>,
}

impl NormalizedLevel {
    pub fn from_level(level: &FeatureLevel) -> Self {
        let channels = level.channels() as usize;
        let mut data = level.data().to_vec();
        for desc in data.chunks_exact_mut(channels) {
            let norm = desc.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in desc.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
        Self {
            name: level.name().to_string(),
            stride: level.stride(),
            width: level.width(),
            height: level.height(),
            channels,
            data,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn descriptor(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    fn cell_index(&self, c: CellCoord) -> usize {
        c.y as usize * self.width as usize + c.x as usize
    }

    fn cell_at(&self, index: usize) -> CellCoord {
        let w = self.width as usize;
        CellCoord::new(self.stride, (index % w) as u32, (index / w) as u32)
    }

    fn children(&self, parent: CellCoord) -> Vec<usize> {
        let x0 = parent.x * 2;
        let y0 = parent.y * 2;
        let mut out = Vec::with_capacity(4);
        for y in y0..(y0 + 2).min(self.height) {
            for x in x0..(x0 + 2).min(self.width) {
                out.push(self.cell_index(CellCoord::new(self.stride, x, y)));
            }
        }
        out
    }
}

/// Exhaustive mutual nearest-neighbor matching of two levels.
pub fn mutual_nn_match(level_a: &FeatureLevel, level_b: &FeatureLevel) -> Result<MatchSet, MatchError> {
    mutual_nn_match_normalized(&NormalizedLevel::from_level(level_a), &NormalizedLevel::from_level(level_b))
}

const ROW_BLOCK: usize = 32;

pub fn mutual_nn_match_normalized(a: &NormalizedLevel, b: &NormalizedLevel) -> Result<MatchSet, MatchError> {
    if a.channels != b.channels {
        return Err(MatchError::ChannelMismatch { a: a.channels, b: b.channels });
    }
    for level in [a, b] {
        if level.cell_count() == 0 {
            return Err(MatchError::EmptyLevel(level.name.clone()));
        }
    }
    let n_a = a.cell_count();
    let n_b = b.cell_count();

    // Each row block yields its rows' best columns plus a partial column
    // minimum; blocks are merged in order so ties keep the lowest row.
    let blocks: Vec<(Vec<(usize, f64)>, Vec<(f64, usize)>)> = (0..n_a.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|block| {
            let start = block * ROW_BLOCK;
            let end = (start + ROW_BLOCK).min(n_a);
            let mut row_best = Vec::with_capacity(end - start);
            let mut col_best = vec![(f64::INFINITY, usize::MAX); n_b];
            for i in start..end {
                let da = a.descriptor(i);
                let mut best = (usize::MAX, f64::INFINITY);
                for (j, col) in col_best.iter_mut().enumerate() {
                    let d = squared_distance(da, b.descriptor(j));
                    if d < best.1 {
                        best = (j, d);
                    }
                    if d < col.0 {
                        *col = (d, i);
                    }
                }
                row_best.push(best);
            }
            (row_best, col_best)
        })
        .collect();

    let mut row_best = Vec::with_capacity(n_a);
    let mut col_best = vec![(f64::INFINITY, usize::MAX); n_b];
    for (rows, cols) in blocks {
        row_best.extend(rows);
        for (acc, c) in col_best.iter_mut().zip(cols) {
            if c.0 < acc.0 {
                *acc = c;
            }
        }
    }

    let matches = row_best
        .iter()
        .enumerate()
        .filter(|&(i, &(j, _))| col_best[j].1 == i)
        .map(|(i, &(j, d))| TentativeMatch {
            cell_a: a.cell_at(i),
            cell_b: b.cell_at(j),
            distance: d.sqrt(),
        })
        .collect();

    Ok(MatchSet {
        image_a: String::new(),
        image_b: String::new(),
        level: a.name.clone(),
        stride: a.stride,
        matches,
    })
}

/// Refines coarse matches one level down, matching only within the child
/// blocks of each coarse pair.
pub fn coarse_to_fine_match(
    coarse: &MatchSet,
    fine_a: &FeatureLevel,
    fine_b: &FeatureLevel,
) -> Result<MatchSet, MatchError> {
    coarse_to_fine_match_normalized(coarse, &NormalizedLevel::from_level(fine_a), &NormalizedLevel::from_level(fine_b))
}

pub fn coarse_to_fine_match_normalized(
    coarse: &MatchSet,
    fine_a: &NormalizedLevel,
    fine_b: &NormalizedLevel,
) -> Result<MatchSet, MatchError> {
    for fine in [fine_a, fine_b] {
        if fine.stride * 2 != coarse.stride {
            return Err(MatchError::StrideChain {
                coarse: coarse.stride,
                fine: fine.stride,
            });
        }
    }
    if fine_a.channels != fine_b.channels {
        return Err(MatchError::ChannelMismatch {
            a: fine_a.channels,
            b: fine_b.channels,
        });
    }
    for m in &coarse.matches {
        let parent_in_bounds = |p: CellCoord, f: &NormalizedLevel| p.x * 2 < f.width && p.y * 2 < f.height;
        if !parent_in_bounds(m.cell_a, fine_a) || !parent_in_bounds(m.cell_b, fine_b) {
            return Err(MatchError::Pyramid(PyramidError::OutOfBounds {
                stride: coarse.stride,
                x: m.cell_a.x,
                y: m.cell_a.y,
                width: fine_a.width.div_ceil(2),
                height: fine_a.height.div_ceil(2),
            }));
        }
    }

    let mut candidates: Vec<(f64, usize, usize)> = coarse
        .matches
        .par_iter()
        .flat_map_iter(|m| {
            let kids_a = fine_a.children(m.cell_a);
            let kids_b = fine_b.children(m.cell_b);
            let dist: Vec<Vec<f64>> = kids_a
                .iter()
                .map(|&i| {
                    kids_b
                        .iter()
                        .map(|&j| squared_distance(fine_a.descriptor(i), fine_b.descriptor(j)))
                        .collect()
                })
                .collect();
            let row_min = |r: usize| argmin((0..kids_b.len()).map(|c| dist[r][c]));
            let col_min = |c: usize| argmin((0..kids_a.len()).map(|r| dist[r][c]));
            (0..kids_a.len())
                .filter_map(|r| {
                    let c = row_min(r);
                    (col_min(c) == r).then(|| (dist[r][c], kids_a[r], kids_b[c]))
                })
                .collect::<Vec<_>>()
        })
        .collect();

    // Child blocks of distinct coarse cells are disjoint, so conflicts only
    // arise from a non-bijective input; resolve them by smallest distance.
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; fine_a.cell_count()];
    let mut used_b = vec![false; fine_b.cell_count()];
    let mut kept = Vec::with_capacity(candidates.len());
    for (d, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            kept.push((i, j, d));
        }
    }
    kept.sort_by_key(|&(i, _, _)| i);

    Ok(MatchSet {
        image_a: coarse.image_a.clone(),
        image_b: coarse.image_b.clone(),
        level: fine_a.name.clone(),
        stride: fine_a.stride,
        matches: kept
            .into_iter()
            .map(|(i, j, d)| TentativeMatch {
                cell_a: fine_a.cell_at(i),
                cell_b: fine_b.cell_at(j),
                distance: d.sqrt(),
            })
            .collect(),
    })
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}
