//! Camera pose evaluation against reference poses.
//!
//! A reconstruction lives in an arbitrary similarity frame. It is first
//! registered to the reference frame with a least-squares similarity fitted
//! on camera centers of the registration (day) images; target (night) images
//! are then scored by center distance and rotation angle. Images missing
//! from the reconstruction count as failures in every percentage.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{self, BufRead};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Default positional thresholds for the accuracy sweep, in meters.
pub const REPORT_THRESHOLDS_M: [f64; 5] = [0.5, 1.0, 5.0, 10.0, 20.0];
/// Angular threshold paired with [`REPORT_THRESHOLDS_M`].
pub const REPORT_ANGLE_DEG: f64 = 10.0;

const ROTATION_TOLERANCE: f64 = 1e-9;
const DEGENERACY_RATIO: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate registration: {0}")]
    Degenerate(String),
    #[error("not a rotation: {0}")]
    NotRotation(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("target image `{0}` has no reference pose")]
    MissingReference(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Camera pose: world-to-camera rotation and camera center in world units.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub name: String,
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl PoseRecord {
    pub fn new(name: impl Into<String>, rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self, EvalError> {
        check_rotation(&rotation)?;
        Ok(Self {
            name: name.into(),
            rotation,
            center,
        })
    }

    /// From a `(w, x, y, z)` quaternion; the quaternion is normalized.
    pub fn from_quaternion(name: impl Into<String>, q: [f64; 4], center: Vector3<f64>) -> Result<Self, EvalError> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(EvalError::NotRotation(format!("quaternion {q:?} has no direction")));
        }
        let rotation = UnitQuaternion::from_quaternion(quat).to_rotation_matrix().into_inner();
        Self::new(name, rotation, center)
    }

    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        [q.w, q.i, q.j, q.k]
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), EvalError> {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(ortho <= ROTATION_TOLERANCE) || !((det - 1.0).abs() <= ROTATION_TOLERANCE) {
        return Err(EvalError::NotRotation(format!("|R^T R - I| = {ortho:e}, det = {det}")));
    }
    Ok(())
}

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }
}

/// Least-squares similarity mapping `source` onto `target` (Umeyama's
/// closed form with the reflection correction).
pub fn fit_similarity(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<SimilarityTransform, EvalError> {
    let n = source.len();
    if n != target.len() {
        return Err(EvalError::Degenerate(format!("{n} source points vs {} target points", target.len())));
    }
    if n < 3 {
        return Err(EvalError::Degenerate(format!("need at least 3 point pairs, got {n}")));
    }
    let nf = n as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() / nf;
    let mu_t = target.iter().sum::<Vector3<f64>>() / nf;

    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        let dt = t - mu_t;
        cov += dt * ds.transpose();
        scatter += ds * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= nf;
    var_s /= nf;

    let spread = scatter.singular_values();
    let (s_max, s_mid) = sorted_top_two(spread.as_slice());
    if !(s_max > 0.0) || s_mid <= DEGENERACY_RATIO * s_max {
        return Err(EvalError::Degenerate("source points are coincident or collinear".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(EvalError::Degenerate("SVD did not converge".into())),
    };
    let d = svd.singular_values;
    let (d_max, d_mid) = sorted_top_two(d.as_slice());
    if !(d_max > 0.0) || d_mid <= DEGENERACY_RATIO * d_max {
        return Err(EvalError::Degenerate("target points are coincident or collinear".into()));
    }

    let mut sign = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // Flip the direction of the smallest singular value.
        let smallest = (0..3).min_by(|&i, &j| d[i].total_cmp(&d[j])).expect("3 values");
        sign[(smallest, smallest)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = (0..3).map(|i| d[i] * sign[(i, i)]).sum::<f64>() / var_s;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(EvalError::Degenerate(format!("fitted scale {scale}")));
    }
    let translation = mu_t - scale * rotation * mu_s;
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

fn sorted_top_two(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    (v[0], v[1])
}

/// Moves a pose into the frame defined by `t`: `C' = sQC + t`, `R' = RQ^T`.
pub fn apply_to_pose(t: &SimilarityTransform, pose: &PoseRecord) -> PoseRecord {
    PoseRecord {
        name: pose.name.clone(),
        rotation: pose.rotation * t.rotation.transpose(),
        center: t.apply(&pose.center),
    }
}

pub fn positional_error(estimate: &PoseRecord, reference: &PoseRecord) -> f64 {
    (estimate.center - reference.center).norm()
}

/// Rotation angle of `R_ref R_est^T`, in degrees.
pub fn angular_error(r_est: &Matrix3<f64>, r_ref: &Matrix3<f64>) -> Result<f64, EvalError> {
    check_rotation(r_est)?;
    check_rotation(r_ref)?;
    let cos = (((r_ref * r_est.transpose()).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseError {
    pub position_m: f64,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub threshold_m: f64,
    pub percent: f64,
}

/// Percentage of all images (`None` = not reconstructed) whose position
/// error is within each threshold and whose angle error is within
/// `angle_threshold_deg`.
pub fn threshold_sweep(errors: &[Option<PoseError>], position_thresholds: &[f64], angle_threshold_deg: f64) -> Vec<SweepRow> {
    let total = errors.len();
    position_thresholds
        .iter()
        .map(|&tau| {
            let hits = errors
                .iter()
                .flatten()
                .filter(|e| e.position_m <= tau && e.angle_deg <= angle_threshold_deg)
                .count();
            SweepRow {
                threshold_m: tau,
                percent: if total == 0 { 0.0 } else { 100.0 * hits as f64 / total as f64 },
            }
        })
        .collect()
}

/// Parses `name qw qx qy qz cx cy cz` lines; blank lines and `#` comments
/// are skipped.
pub fn read_poses<R: BufRead>(reader: R) -> Result<Vec<PoseRecord>, EvalError> {
    let mut poses = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let parse_err = |reason: String| EvalError::Parse { line: i + 1, reason };
        if fields.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, got {}", fields.len())));
        }
        let nums = fields[1..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(format!("bad number {t:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let pose = PoseRecord::from_quaternion(
            fields[0],
            [nums[0], nums[1], nums[2], nums[3]],
            Vector3::new(nums[4], nums[5], nums[6]),
        )
        .map_err(|e| parse_err(e.to_string()))?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn poses_text(poses: &[PoseRecord]) -> String {
    let mut out = String::new();
    for p in poses {
        let q = p.quaternion();
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            p.name, q[0], q[1], q[2], q[3], p.center.x, p.center.y, p.center.z
        );
    }
    out
}

/// Result of registering a reconstruction and scoring its target images.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub transform: SimilarityTransform,
    pub registration_images: Vec<String>,
    /// Per target image, in the order given; `None` if not reconstructed.
    pub target_errors: Vec<(String, Option<PoseError>)>,
    pub sweep: Vec<SweepRow>,
    pub angle_threshold_deg: f64,
    pub targets_reconstructed: usize,
    pub registration_reconstructed: usize,
    pub registration_total: usize,
}

impl EvaluationReport {
    pub fn targets_total(&self) -> usize {
        self.target_errors.len()
    }

    pub fn errors_csv(&self) -> String {
        let mut out = String::from("image,reconstructed,position_m,angle_deg\n");
        for (name, err) in &self.target_errors {
            match err {
                Some(e) => {
                    let _ = writeln!(out, "{name},1,{:.6},{:.6}", e.position_m, e.angle_deg);
                }
                None => {
                    let _ = writeln!(out, "{name},0,,");
                }
            }
        }
        out
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("threshold_m,percent\n");
        for row in &self.sweep {
            let _ = writeln!(out, "{},{:.2}", row.threshold_m, row.percent);
        }
        out
    }

    /// Reconstructed versus total counts for target and registration sets.
    pub fn counts_csv(&self) -> String {
        format!(
            "set,reconstructed,total\ntarget,{},{}\nregistration,{},{}\n",
            self.targets_reconstructed,
            self.targets_total(),
            self.registration_reconstructed,
            self.registration_total
        )
    }
}

/// Registers `estimated` onto `reference` using the registration images
/// present in both, then scores every target image.
pub fn evaluate_poses(
    estimated: &[PoseRecord],
    reference: &[PoseRecord],
    registration: &[String],
    targets: &[String],
    position_thresholds: &[f64],
    angle_threshold_deg: f64,
) -> Result<EvaluationReport, EvalError> {
    let est: HashMap<&str, &PoseRecord> = estimated.iter().map(|p| (p.name.as_str(), p)).collect();
    let refs: HashMap<&str, &PoseRecord> = reference.iter().map(|p| (p.name.as_str(), p)).collect();

    let shared: Vec<&String> = registration
        .iter()
        .filter(|n| est.contains_key(n.as_str()) && refs.contains_key(n.as_str()))
        .collect();
    if shared.len() < 3 {
        return Err(EvalError::Degenerate(format!(
            "only {} registration image(s) are both reconstructed and in the reference set; \
             at least 3 with non-collinear centers are required",
            shared.len()
        )));
    }
    let src: Vec<Vector3<f64>> = shared.iter().map(|n| est[n.as_str()].center).collect();
    let dst: Vec<Vector3<f64>> = shared.iter().map(|n| refs[n.as_str()].center).collect();
    let transform = fit_similarity(&src, &dst)?;

    let mut target_errors = Vec::with_capacity(targets.len());
    for name in targets {
        let reference = refs.get(name.as_str()).ok_or_else(|| EvalError::MissingReference(name.clone()))?;
        let err = match est.get(name.as_str()) {
            Some(p) => {
                let aligned = apply_to_pose(&transform, p);
                Some(PoseError {
                    position_m: positional_error(&aligned, reference),
                    angle_deg: angular_error(&aligned.rotation, &reference.rotation)?,
                })
            }
            None => None,
        };
        target_errors.push((name.clone(), err));
    }
    let errors: Vec<Option<PoseError>> = target_errors.iter().map(|(_, e)| *e).collect();
    let sweep = threshold_sweep(&errors, position_thresholds, angle_threshold_deg);
    Ok(EvaluationReport {
        transform,
        registration_images: shared.iter().map(|s| s.to_string()).collect(),
        targets_reconstructed: errors.iter().flatten().count(),
        target_errors,
        sweep,
        angle_threshold_deg,
        registration_reconstructed: registration.iter().filter(|n| est.contains_key(n.as_str())).count(),
        registration_total: registration.len(),
    })
}

/// Reads a list of image names, one per line.
pub fn read_name_list<R: BufRead>(reader: R) -> Result<Vec<String>, EvalError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            out.push(t.to_string());
        }
    }
    Ok(out)
}
