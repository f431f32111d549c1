//! Planar homography fitting and the symmetric transfer error.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::pyramid::ImageCoord;
use crate::verify::VerifyError;

/// Sine of the smallest angle at which three points still count as
/// non-collinear.
const COLLINEAR_SINE: f64 = 1e-6;
/// Relative size of the second-smallest singular value below which the DLT
/// system has more than one null direction.
const RANK_TOLERANCE: f64 = 1e-10;
const MIN_DETERMINANT: f64 = 1e-12;
const MIN_W: f64 = 1e-12;

/// Fits `H` with `b ~ H a` by normalized DLT.
///
/// Points on each side are shifted to their centroid and scaled to a mean
/// distance of `sqrt(2)` before solving; the result is scaled so
/// `H[(2, 2)] = 1` unless that entry vanishes, in which case it has unit
/// Frobenius norm.
pub fn estimate_homography_dlt(pairs: &[(ImageCoord, ImageCoord)]) -> Result<Matrix3<f64>, VerifyError> {
    let n = pairs.len();
    if n < 4 {
        return Err(VerifyError::NotEnoughCorrespondences(n));
    }
    if n == 4 {
        let a: Vec<ImageCoord> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<ImageCoord> = pairs.iter().map(|p| p.1).collect();
        if has_collinear_triple(&a) || has_collinear_triple(&b) {
            return Err(VerifyError::Degenerate("collinear triple in minimal sample".into()));
        }
    }

    let ta = normalizing_transform(pairs.iter().map(|p| p.0))?;
    let tb = normalizing_transform(pairs.iter().map(|p| p.1))?;

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pa, pb)) in pairs.iter().enumerate() {
        let (x, y) = apply_affine(&ta, pa);
        let (xp, yp) = apply_affine(&tb, pb);
        let r = 2 * i;
        a[(r, 3)] = -x;
        a[(r, 4)] = -y;
        a[(r, 5)] = -1.0;
        a[(r, 6)] = yp * x;
        a[(r, 7)] = yp * y;
        a[(r, 8)] = yp;
        a[(r + 1, 0)] = x;
        a[(r + 1, 1)] = y;
        a[(r + 1, 2)] = 1.0;
        a[(r + 1, 6)] = -xp * x;
        a[(r + 1, 7)] = -xp * y;
        a[(r + 1, 8)] = -xp;
    }

    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| VerifyError::Degenerate("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let smallest = order[0];
    let second = svd.singular_values[order[1]];
    let largest = svd.singular_values[order[order.len() - 1]];
    if !(largest > 0.0) || second <= RANK_TOLERANCE * largest {
        return Err(VerifyError::Degenerate("rank-deficient DLT system".into()));
    }
    let h = v_t.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);

    let tb_inv = tb
        .try_inverse()
        .ok_or_else(|| VerifyError::Degenerate("singular normalization".into()))?;
    let h = normalize_scale(tb_inv * hn * ta);
    if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() <= MIN_DETERMINANT {
        return Err(VerifyError::Degenerate("singular homography".into()));
    }
    Ok(h)
}

fn normalize_scale(h: Matrix3<f64>) -> Matrix3<f64> {
    let frob = h.norm();
    if h[(2, 2)].abs() > 1e-12 * frob {
        h / h[(2, 2)]
    } else {
        h / frob
    }
}

fn normalizing_transform(points: impl Iterator<Item = ImageCoord> + Clone) -> Result<Matrix3<f64>, VerifyError> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(x, y), p| (x + p.u, y + p.v));
    let (cx, cy) = (sx / n, sy / n);
    let mean_dist = points.map(|p| ((p.u - cx).powi(2) + (p.v - cy).powi(2)).sqrt()).sum::<f64>() / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return Err(VerifyError::Degenerate("coincident points".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply_affine(t: &Matrix3<f64>, p: &ImageCoord) -> (f64, f64) {
    (t[(0, 0)] * p.u + t[(0, 2)], t[(1, 1)] * p.v + t[(1, 2)])
}

fn has_collinear_triple(points: &[ImageCoord]) -> bool {
    let n = points.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if collinear(points[i], points[j], points[k]) {
                    return true;
                }
            }
        }
    }
    false
}

fn collinear(p: ImageCoord, q: ImageCoord, r: ImageCoord) -> bool {
    let (ax, ay) = (q.u - p.u, q.v - p.v);
    let (bx, by) = (r.u - p.u, r.v - p.v);
    let cross = (ax * by - ay * bx).abs();
    let scale = (ax.hypot(ay)) * (bx.hypot(by));
    scale == 0.0 || cross <= COLLINEAR_SINE * scale
}

/// Maps a point through `h`; `None` when it lands at infinity.
pub fn project(h: &Matrix3<f64>, p: ImageCoord) -> Option<ImageCoord> {
    let q = h * Vector3::new(p.u, p.v, 1.0);
    if q.z.abs() < MIN_W || !q.z.is_finite() {
        return None;
    }
    Some(ImageCoord::new(q.x / q.z, q.y / q.z))
}

/// `|H a - b| + |H^-1 b - a|` in pixels; infinite when either projection
/// is undefined or `h` is singular.
pub fn symmetric_transfer_error(h: &Matrix3<f64>, a: ImageCoord, b: ImageCoord) -> f64 {
    match h.try_inverse() {
        Some(inv) => TransferError::with_inverse(*h, inv).eval(a, b),
        None => f64::INFINITY,
    }
}

/// Homography with its inverse cached for repeated error evaluation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TransferError {
    forward: Matrix3<f64>,
    backward: Matrix3<f64>,
}

impl TransferError {
    pub(crate) fn new(h: Matrix3<f64>) -> Option<Self> {
        h.try_inverse().map(|inv| Self::with_inverse(h, inv))
    }

    fn with_inverse(forward: Matrix3<f64>, backward: Matrix3<f64>) -> Self {
        Self { forward, backward }
    }

    pub(crate) fn eval(&self, a: ImageCoord, b: ImageCoord) -> f64 {
        match (project(&self.forward, a), project(&self.backward, b)) {
            (Some(fa), Some(bb)) => (fa.u - b.u).hypot(fa.v - b.v) + (bb.u - a.u).hypot(bb.v - a.v),
            _ => f64::INFINITY,
        }
    }
}
