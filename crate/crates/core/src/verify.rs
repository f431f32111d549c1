//! Geometric verification by repeated homography RANSAC, and best-N pair
//! retention.
//!
//! Each RANSAC round finds the homography with the largest support among
//! the correspondences still unexplained, removes its inliers and starts
//! over, so scenes made of several planes keep matches on all of them.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Matrix3;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::homography::{estimate_homography_dlt, TransferError};
use crate::pyramid::ImageCoord;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("need at least 4 correspondences, got {0}")]
    NotEnoughCorrespondences(usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("no homography supported by at least 4 inliers")]
    NoModel,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

pub type Correspondence = (ImageCoord, ImageCoord);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Inlier threshold on the symmetric transfer error, in pixels.
    pub threshold: f64,
    pub max_iters: usize,
    /// Probability of drawing at least one all-inlier sample, used to
    /// shrink the iteration budget as support grows.
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 10.0,
            max_iters: 2000,
            confidence: 0.999,
        }
    }
}

impl RansacParams {
    fn validate(&self) -> Result<(), VerifyError> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(VerifyError::InvalidParams(format!("threshold {}", self.threshold)));
        }
        if self.max_iters == 0 {
            return Err(VerifyError::InvalidParams("max_iters must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(VerifyError::InvalidParams(format!("confidence {}", self.confidence)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiHomographyParams {
    pub ransac: RansacParams,
    pub max_models: usize,
    /// Smallest support for a model to be kept.
    pub min_inliers: usize,
}

impl Default for MultiHomographyParams {
    fn default() -> Self {
        Self {
            ransac: RansacParams::default(),
            max_models: 5,
            min_inliers: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyModel {
    pub h: Matrix3<f64>,
    /// Indices into the correspondence list, ascending.
    pub inliers: Vec<usize>,
}

impl HomographyModel {
    pub fn score(&self) -> usize {
        self.inliers.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedPair {
    pub image_a: String,
    pub image_b: String,
    pub correspondences: Vec<Correspondence>,
    pub models: Vec<HomographyModel>,
    pub total_inliers: usize,
}

impl VerifiedPair {
    /// Union of all model inliers, ascending.
    pub fn inlier_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.models.iter().flat_map(|m| m.inliers.iter().copied()).collect();
        all.sort_unstable();
        all
    }

    pub fn inlier_correspondences(&self) -> Vec<Correspondence> {
        self.inlier_indices().into_iter().map(|i| self.correspondences[i]).collect()
    }

    /// Checks disjointness, the score sum and, for every inlier, the
    /// transfer error against its model.
    pub fn check_invariants(&self, threshold: f64) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (k, m) in self.models.iter().enumerate() {
            let err = TransferError::new(m.h).ok_or_else(|| format!("model {k} is singular"))?;
            for &i in &m.inliers {
                if !seen.insert(i) {
                    return Err(format!("correspondence {i} belongs to more than one model"));
                }
                let (a, b) = *self
                    .correspondences
                    .get(i)
                    .ok_or_else(|| format!("model {k} references missing correspondence {i}"))?;
                let e = err.eval(a, b);
                if !(e <= threshold) {
                    return Err(format!("correspondence {i} has error {e} > {threshold} under model {k}"));
                }
            }
        }
        let sum: usize = self.models.iter().map(HomographyModel::score).sum();
        if sum != self.total_inliers {
            return Err(format!("total_inliers {} != model score sum {sum}", self.total_inliers));
        }
        Ok(())
    }
}

/// Single-model RANSAC over all correspondences.
pub fn homography_ransac(
    correspondences: &[Correspondence],
    params: &RansacParams,
    seed: u64,
) -> Result<HomographyModel, VerifyError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..correspondences.len()).collect();
    ransac_subset(correspondences, &all, params, &mut rng)
}

fn iterations_needed(inlier_ratio: f64, confidence: f64, max_iters: usize) -> usize {
    let p_good = inlier_ratio.powi(4);
    if p_good >= 1.0 {
        return 1;
    }
    if p_good <= f64::EPSILON {
        return max_iters;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - p_good).ln()).ceil();
    if n.is_finite() && n >= 1.0 {
        (n as usize).min(max_iters)
    } else {
        max_iters
    }
}

fn inliers_of(correspondences: &[Correspondence], subset: &[usize], err: &TransferError, threshold: f64) -> Vec<usize> {
    subset
        .iter()
        .copied()
        .filter(|&i| {
            let (a, b) = correspondences[i];
            err.eval(a, b) <= threshold
        })
        .collect()
}

fn ransac_subset(
    correspondences: &[Correspondence],
    subset: &[usize],
    params: &RansacParams,
    rng: &mut ChaCha8Rng,
) -> Result<HomographyModel, VerifyError> {
    let n = subset.len();
    if n < 4 {
        return Err(VerifyError::NotEnoughCorrespondences(n));
    }

    let mut best: Option<(Matrix3<f64>, Vec<usize>)> = None;
    let mut budget = params.max_iters;
    let mut iter = 0;
    while iter < budget {
        iter += 1;
        let sample: Vec<Correspondence> = index::sample(rng, n, 4)
            .into_iter()
            .map(|k| correspondences[subset[k]])
            .collect();
        let Ok(h) = estimate_homography_dlt(&sample) else {
            continue;
        };
        let Some(err) = TransferError::new(h) else {
            continue;
        };
        let inliers = inliers_of(correspondences, subset, &err, params.threshold);
        if best.as_ref().is_none_or(|(_, b)| inliers.len() > b.len()) {
            budget = iterations_needed(inliers.len() as f64 / n as f64, params.confidence, params.max_iters);
            best = Some((h, inliers));
        }
    }

    let (mut h, mut inliers) = best.ok_or(VerifyError::NoModel)?;
    if inliers.len() < 4 {
        return Err(VerifyError::NoModel);
    }

    // Refit on the consensus set; keep the refit only when it does not lose
    // support, so every reported inlier is within threshold of the final H.
    for _ in 0..5 {
        let pts: Vec<Correspondence> = inliers.iter().map(|&i| correspondences[i]).collect();
        let Ok(refit) = estimate_homography_dlt(&pts) else {
            break;
        };
        let Some(err) = TransferError::new(refit) else {
            break;
        };
        let refit_inliers = inliers_of(correspondences, subset, &err, params.threshold);
        if refit_inliers.len() < inliers.len() {
            break;
        }
        let converged = refit_inliers == inliers;
        h = refit;
        inliers = refit_inliers;
        if converged {
            break;
        }
    }

    Ok(HomographyModel { h, inliers })
}

/// Repeated RANSAC with inlier exclusion. Finding no model at all is a valid
/// outcome and yields a pair with zero inliers.
pub fn multi_homography_ransac(
    image_a: impl Into<String>,
    image_b: impl Into<String>,
    correspondences: Vec<Correspondence>,
    params: &MultiHomographyParams,
    seed: u64,
) -> Result<VerifiedPair, VerifyError> {
    params.ransac.validate()?;
    if params.max_models == 0 {
        return Err(VerifyError::InvalidParams("max_models must be positive".into()));
    }
    let min_support = params.min_inliers.max(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<usize> = (0..correspondences.len()).collect();
    let mut models = Vec::new();

    while models.len() < params.max_models && remaining.len() >= min_support {
        let model = match ransac_subset(&correspondences, &remaining, &params.ransac, &mut rng) {
            Ok(m) => m,
            Err(VerifyError::NoModel | VerifyError::NotEnoughCorrespondences(_)) => break,
            Err(e) => return Err(e),
        };
        if model.score() < min_support {
            break;
        }
        let taken: BTreeSet<usize> = model.inliers.iter().copied().collect();
        remaining.retain(|i| !taken.contains(i));
        models.push(model);
    }

    let total_inliers = models.iter().map(HomographyModel::score).sum();
    Ok(VerifiedPair {
        image_a: image_a.into(),
        image_b: image_b.into(),
        correspondences,
        models,
        total_inliers,
    })
}

/// Pairs kept by best-N retention.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RetainedPairs {
    /// For each image, the indices of its top pairs, best first.
    pub per_image: BTreeMap<String, Vec<usize>>,
    /// Indices kept by at least one endpoint, ascending.
    pub retained: BTreeSet<usize>,
}

/// Keeps, for every image, its `n` pairs with the most inliers; a pair
/// survives if either endpoint keeps it. Ties go to the earlier pair.
pub fn rank_pairs(pairs: &[VerifiedPair], n: usize) -> Result<RetainedPairs, VerifyError> {
    if n == 0 {
        return Err(VerifyError::InvalidParams("best-N must be at least 1".into()));
    }
    let mut by_image: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_image.entry(p.image_a.clone()).or_default().push(i);
        if p.image_b != p.image_a {
            by_image.entry(p.image_b.clone()).or_default().push(i);
        }
    }
    let mut out = RetainedPairs::default();
    for (image, mut idx) in by_image {
        idx.sort_by(|&x, &y| pairs[y].total_inliers.cmp(&pairs[x].total_inliers).then(x.cmp(&y)));
        idx.truncate(n);
        out.retained.extend(idx.iter().copied());
        out.per_image.insert(image, idx);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homography::project;
    use rand::Rng;

    fn c(u: f64, v: f64) -> ImageCoord {
        ImageCoord::new(u, v)
    }

    fn grid_pairs(h: &Matrix3<f64>, n: usize) -> Vec<Correspondence> {
        (0..n)
            .map(|i| {
                let p = c((i % 10) as f64 * 30.0 + 5.0, (i / 10) as f64 * 25.0 + 3.0);
                (p, project(h, p).unwrap())
            })
            .collect()
    }

    fn pair(a: &str, b: &str, inliers: usize) -> VerifiedPair {
        VerifiedPair {
            image_a: a.into(),
            image_b: b.into(),
            correspondences: vec![],
            models: vec![],
            total_inliers: inliers,
        }
    }

    #[test]
    fn exact_data_all_inliers() {
        let h0 = Matrix3::new(1.05, 0.03, 12.0, -0.02, 0.97, -4.0, 1e-5, -2e-5, 1.0);
        let pairs = grid_pairs(&h0, 100);
        let m = homography_ransac(&pairs, &RansacParams::default(), 1).unwrap();
        assert_eq!(m.score(), 100);
        for &(a, b) in &pairs {
            assert!(crate::homography::symmetric_transfer_error(&m.h, a, b) <= 1e-6);
        }
    }

    #[test]
    fn three_correspondences_no_model() {
        let pairs = vec![(c(0.0, 0.0), c(0.0, 0.0)); 3];
        assert!(matches!(
            homography_ransac(&pairs, &RansacParams::default(), 0),
            Err(VerifyError::NotEnoughCorrespondences(3))
        ));
    }

    #[test]
    fn planted_inliers_recovered() {
        let h0 = Matrix3::new(0.9, 0.1, 30.0, -0.05, 1.1, 10.0, 1e-4, 5e-5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut pairs = grid_pairs(&h0, 70);
        for _ in 0..30 {
            pairs.push((
                c(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                c(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
            ));
        }
        let m = homography_ransac(&pairs, &RansacParams::default(), 5).unwrap();
        let recovered = m.inliers.iter().filter(|&&i| i < 70).count();
        assert!(recovered as f64 >= 0.95 * 70.0, "{recovered}");
    }

    #[test]
    fn single_plane_stops_after_one_model() {
        let h0 = Matrix3::new(1.0, 0.0, 5.0, 0.0, 1.0, -3.0, 0.0, 0.0, 1.0);
        let pairs = grid_pairs(&h0, 60);
        let v = multi_homography_ransac("a", "b", pairs, &MultiHomographyParams::default(), 3).unwrap();
        assert_eq!(v.models.len(), 1);
        assert_eq!(v.total_inliers, 60);
        v.check_invariants(10.0).unwrap();
    }

    #[test]
    fn no_model_is_an_empty_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<_> = (0..12)
            .map(|_| {
                (
                    c(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                    c(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                )
            })
            .collect();
        let v = multi_homography_ransac("a", "b", pairs, &MultiHomographyParams::default(), 3).unwrap();
        assert!(v.models.is_empty());
        assert_eq!(v.total_inliers, 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let h0 = Matrix3::new(0.9, 0.1, 30.0, -0.05, 1.1, 10.0, 1e-4, 5e-5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pairs = grid_pairs(&h0, 50);
        for _ in 0..50 {
            pairs.push((
                c(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                c(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
            ));
        }
        let p = MultiHomographyParams::default();
        let v1 = multi_homography_ransac("a", "b", pairs.clone(), &p, 42).unwrap();
        let v2 = multi_homography_ransac("a", "b", pairs, &p, 42).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = RansacParams {
            threshold: 0.0,
            ..Default::default()
        };
        assert!(matches!(homography_ransac(&[], &bad, 0), Err(VerifyError::InvalidParams(_))));
    }

    #[test]
    fn adaptive_iteration_count() {
        assert_eq!(iterations_needed(1.0, 0.99, 1000), 1);
        assert_eq!(iterations_needed(0.0, 0.99, 1000), 1000);
        // (1 - 0.5^4)^N <= 0.01  =>  N = ceil(ln 0.01 / ln 0.9375) = 72
        assert_eq!(iterations_needed(0.5, 0.99, 1000), 72);
        assert_eq!(iterations_needed(0.1, 0.99, 1000), 1000);
    }

    #[test]
    fn rank_pairs_union_rule() {
        let pairs = vec![pair("A", "B", 100), pair("B", "C", 50), pair("A", "C", 10)];
        let r = rank_pairs(&pairs, 1).unwrap();
        assert_eq!(r.retained, BTreeSet::from([0, 1]));
        assert_eq!(r.per_image["A"], vec![0]);
        assert_eq!(r.per_image["B"], vec![0]);
        assert_eq!(r.per_image["C"], vec![1]);
        let all = rank_pairs(&pairs, 10).unwrap();
        assert_eq!(all.retained, BTreeSet::from([0, 1, 2]));
        assert!(rank_pairs(&pairs, 0).is_err());
    }
}
