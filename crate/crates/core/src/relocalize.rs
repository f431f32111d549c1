//! Keypoint relocalization.
//!
//! A matched cell is pushed down the pyramid one level at a time: among its
//! `K x K` child cells, the one whose raw descriptor has the largest L2 norm
//! becomes the new keypoint. Repeating this until stride 1 lands every
//! keypoint on an image pixel without changing the number of matches.

use rayon::prelude::*;
use thiserror::Error;

use crate::matching::MatchSet;
use crate::pyramid::{CellCoord, FeatureLevel, FeaturePyramid, ImageCoord, PyramidError};

/// Window size used for all relocalization steps unless configured.
pub const DEFAULT_WINDOW: u32 = 2;

#[derive(Debug, Error)]
pub enum RelocalizeError {
    #[error("relocalization window must be at least 1")]
    InvalidWindow,
    #[error("child stride {child} is not half of parent stride {parent}")]
    StrideChain { parent: u32, child: u32 },
    #[error("pyramid is missing the stride-{0} level needed for the descent")]
    MissingLevel(u32),
    #[error("cell {0:?} has no children in bounds")]
    NoChildren(CellCoord),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

/// Per-cell L2 norms of the raw descriptors of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct NormMap {
    level: String,
    stride: u32,
    width: u32,
    height: u32,
    norms: Vec<f32>,
}

impl NormMap {
    pub fn level(&self) -> &str {
        &self.level
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

    pub fn norms(&self) -> &[f32] {
        &self.norms
    }

    pub fn norm_at(&self, x: u32, y: u32) -> f32 {
        self.norms[y as usize * self.width as usize + x as usize]
    }
}

pub fn compute_norm_map(level: &FeatureLevel) -> NormMap {
    let norms = level
        .data()
        .par_chunks_exact(level.channels() as usize)
        .map(|d| d.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32)
        .collect();
    NormMap {
        level: level.name().to_string(),
        stride: level.stride(),
        width: level.width(),
        height: level.height(),
        norms,
    }
}

/// One descent step: the largest-norm cell of the clipped `k x k` child
/// window of `cell`, ties resolved to the lowest row-major index.
pub fn relocate_one_step(cell: CellCoord, child_norms: &NormMap, k: u32) -> Result<CellCoord, RelocalizeError> {
    if k == 0 {
        return Err(RelocalizeError::InvalidWindow);
    }
    if child_norms.stride * 2 != cell.stride {
        return Err(RelocalizeError::StrideChain {
            parent: cell.stride,
            child: child_norms.stride,
        });
    }
    let x0 = cell.x * 2;
    let y0 = cell.y * 2;
    let x1 = (x0 + k).min(child_norms.width);
    let y1 = (y0 + k).min(child_norms.height);
    let mut best: Option<(CellCoord, f32)> = None;
    for y in y0..y1 {
        for x in x0..x1 {
            let n = child_norms.norm_at(x, y);
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((CellCoord::new(child_norms.stride, x, y), n));
            }
        }
    }
    best.map(|(c, _)| c).ok_or(RelocalizeError::NoChildren(cell))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelocalizedKeypoint {
    pub origin: CellCoord,
    /// Image position of the stride-1 cell the descent ended on.
    pub final_coord: ImageCoord,
    /// Cells visited, starting with `origin` and ending at stride 1.
    pub path: Vec<CellCoord>,
}

/// Norm maps of one pyramid, computed once and reused for every keypoint.
#[derive(Debug, Clone)]
pub struct Relocalizer {
    maps: Vec<NormMap>,
    image_width: u32,
    image_height: u32,
    window: u32,
}

impl Relocalizer {
    pub fn new(pyramid: &FeaturePyramid, window: u32) -> Result<Self, RelocalizeError> {
        if window == 0 {
            return Err(RelocalizeError::InvalidWindow);
        }
        // The coarsest level is never anyone's child.
        let maps = pyramid.levels().iter().skip(1).map(compute_norm_map).collect();
        Ok(Self {
            maps,
            image_width: pyramid.image_width(),
            image_height: pyramid.image_height(),
            window,
        })
    }

    fn map_for_stride(&self, stride: u32) -> Option<&NormMap> {
        self.maps.iter().find(|m| m.stride == stride)
    }

    pub fn relocalize(&self, origin: CellCoord) -> Result<RelocalizedKeypoint, RelocalizeError> {
        let (w, h) = (self.image_width.div_ceil(origin.stride), self.image_height.div_ceil(origin.stride));
        if origin.stride == 0 || !origin.stride.is_power_of_two() || origin.x >= w || origin.y >= h {
            return Err(PyramidError::OutOfBounds {
                stride: origin.stride,
                x: origin.x,
                y: origin.y,
                width: w,
                height: h,
            }
            .into());
        }
        let mut path = vec![origin];
        let mut cell = origin;
        while cell.stride > 1 {
            let child = self
                .map_for_stride(cell.stride / 2)
                .ok_or(RelocalizeError::MissingLevel(cell.stride / 2))?;
            cell = relocate_one_step(cell, child, self.window)?;
            path.push(cell);
        }
        Ok(RelocalizedKeypoint {
            origin,
            final_coord: ImageCoord::new(cell.x as f64, cell.y as f64),
            path,
        })
    }
}

/// Relocalizes a single cell with `K = 2`.
pub fn relocalize(origin: CellCoord, pyramid: &FeaturePyramid) -> Result<RelocalizedKeypoint, RelocalizeError> {
    pyramid.level_by_stride(origin.stride)?.check_cell(origin)?;
    Relocalizer::new(pyramid, DEFAULT_WINDOW)?.relocalize(origin)
}

/// Relocalizes both endpoints of every match; output order and count follow
/// the input.
pub fn relocalize_matchset(
    matches: &MatchSet,
    pyramid_a: &FeaturePyramid,
    pyramid_b: &FeaturePyramid,
) -> Result<Vec<(ImageCoord, ImageCoord)>, RelocalizeError> {
    pyramid_a.level_by_stride(matches.stride)?;
    pyramid_b.level_by_stride(matches.stride)?;
    let ra = Relocalizer::new(pyramid_a, DEFAULT_WINDOW)?;
    let rb = Relocalizer::new(pyramid_b, DEFAULT_WINDOW)?;
    relocalize_matches_with(matches, &ra, &rb)
}

pub fn relocalize_matches_with(
    matches: &MatchSet,
    reloc_a: &Relocalizer,
    reloc_b: &Relocalizer,
) -> Result<Vec<(ImageCoord, ImageCoord)>, RelocalizeError> {
    matches
        .matches
        .par_iter()
        .map(|m| Ok((reloc_a.relocalize(m.cell_a)?.final_coord, reloc_b.relocalize(m.cell_b)?.final_coord)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::TentativeMatch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm_level(stride: u32, w: u32, h: u32, norms: &[f32]) -> FeatureLevel {
        FeatureLevel::new(format!("s{stride}"), stride, w, h, 1, norms.to_vec()).unwrap()
    }

    fn random_pyramid(rng: &mut ChaCha8Rng, w: u32, h: u32, top: u32) -> FeaturePyramid {
        let mut levels = Vec::new();
        let mut s = top;
        while s >= 1 {
            let (lw, lh) = (w.div_ceil(s), h.div_ceil(s));
            let data = (0..lw * lh * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            levels.push(FeatureLevel::new(format!("s{s}"), s, lw, lh, 3, data).unwrap());
            s /= 2;
        }
        FeaturePyramid::new("r", w, h, levels).unwrap()
    }

    #[test]
    fn norm_map_examples() {
        let zero = FeatureLevel::new("z", 1, 2, 2, 3, vec![0.0; 12]).unwrap();
        assert!(compute_norm_map(&zero).norms().iter().all(|&n| n == 0.0));
        let one = FeatureLevel::new("o", 1, 1, 1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(compute_norm_map(&one).norms(), &[5.0]);
    }

    #[test]
    fn norm_map_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..4 * 4 * 8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let level = FeatureLevel::new("r", 1, 4, 4, 8, data.clone()).unwrap();
        let map = compute_norm_map(&level);
        for cell in 0..16 {
            let mut sum = 0.0f64;
            for k in 0..8 {
                sum += (data[cell * 8 + k] as f64).powi(2);
            }
            let expected = sum.sqrt();
            assert!((map.norms()[cell] as f64 - expected).abs() <= 1e-5 * expected);
        }
    }

    #[test]
    fn one_step_picks_largest_child() {
        let map = compute_norm_map(&norm_level(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(relocate_one_step(CellCoord::new(2, 0, 0), &map, 2).unwrap(), CellCoord::new(1, 1, 1));
        let flat = compute_norm_map(&norm_level(1, 4, 4, &[1.0; 16]));
        assert_eq!(relocate_one_step(CellCoord::new(2, 1, 1), &flat, 2).unwrap(), CellCoord::new(1, 2, 2));
    }

    #[test]
    fn one_step_errors() {
        let map = compute_norm_map(&norm_level(1, 2, 2, &[1.0; 4]));
        assert!(matches!(
            relocate_one_step(CellCoord::new(4, 0, 0), &map, 2),
            Err(RelocalizeError::StrideChain { parent: 4, child: 1 })
        ));
        assert!(matches!(
            relocate_one_step(CellCoord::new(2, 5, 0), &map, 2),
            Err(RelocalizeError::NoChildren(_))
        ));
        assert!(matches!(relocate_one_step(CellCoord::new(2, 0, 0), &map, 0), Err(RelocalizeError::InvalidWindow)));
    }

    #[test]
    fn path_length_follows_stride_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pyramid(&mut rng, 20, 13, 8);
        let k = relocalize(CellCoord::new(8, 1, 1), &p).unwrap();
        assert_eq!(k.path.len(), 4);
        assert_eq!(k.path.iter().map(|c| c.stride).collect::<Vec<_>>(), vec![8, 4, 2, 1]);
        let last = k.path.last().unwrap();
        assert_eq!(k.final_coord, ImageCoord::new(last.x as f64, last.y as f64));

        let k = relocalize(CellCoord::new(1, 5, 7), &p).unwrap();
        assert_eq!(k.path, vec![CellCoord::new(1, 5, 7)]);
        assert_eq!(k.final_coord, ImageCoord::new(5.0, 7.0));
    }

    #[test]
    fn missing_level_reported() {
        // Pyramid only has stride 2 and 1; a stride-4 origin cannot descend.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_pyramid(&mut rng, 8, 8, 2);
        let r = Relocalizer::new(&p, 2).unwrap();
        assert!(matches!(r.relocalize(CellCoord::new(4, 0, 0)), Err(RelocalizeError::MissingLevel(2)) | Err(RelocalizeError::MissingLevel(4))));
    }

    #[test]
    fn matchset_quantity_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pyramid(&mut rng, 16, 16, 4);
        // Many-to-one style input: collisions are allowed to survive.
        let m = MatchSet {
            level: "s4".into(),
            stride: 4,
            matches: (0..4)
                .map(|i| TentativeMatch {
                    cell_a: CellCoord::new(4, i % 4, i / 4),
                    cell_b: CellCoord::new(4, i % 4, i / 4),
                    distance: 0.0,
                })
                .collect(),
            ..Default::default()
        };
        let out = relocalize_matchset(&m, &p, &p).unwrap();
        assert_eq!(out.len(), m.len());
        for (a, b) in out {
            assert_eq!(a, b);
        }
    }
}
