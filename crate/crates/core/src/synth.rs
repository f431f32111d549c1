//! Synthetic planar scenes with analytically generated feature pyramids.
//!
//! A textured plane `z = 0` is viewed by pinhole cameras. Every pixel gets a
//! sparse non-negative descriptor sampled from a blob texture at the
//! plane point it sees; coarser levels are 2x2 max-pools of the level below,
//! the same shape a convolutional backbone's pooling stages produce. No
//! network is involved, so ground-truth homographies and poses are exact.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::eval::{apply_to_pose, poses_text, PoseRecord, SimilarityTransform};
use crate::homography::project;
use crate::pyramid::{save_pyramid, FeatureLevel, FeaturePyramid, ImageCoord, PyramidError};

/// Stride and name of each generated level, coarsest first.
pub const LEVELS: [(u32, &str); 5] = [
    (16, "conv4_pool"),
    (8, "conv3_pool"),
    (4, "conv2_pool"),
    (2, "conv1_pool"),
    (1, "conv1_2"),
];

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Multi-channel plane texture: isolated Gaussian blobs, one per lattice
/// cell at a hashed position, over a faint value-noise background. Each blob
/// carries its own sparse channel signature, so descriptor norms peak at
/// blob centers the way strong filter responses do.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texture {
    pub seed: u64,
    pub channels: u32,
}

impl Texture {
    const BLOB_SPACING: f64 = 12.0;
    const BLOB_SIGMA: f64 = 1.3;
    const NOISE_SPACING: f64 = 5.0;
    const NOISE_WEIGHT: f64 = 0.15;

    pub fn new(seed: u64, channels: u32) -> Self {
        Self { seed, channels }
    }

    fn hash(&self, ix: i64, iy: i64, salt: u64) -> f64 {
        let key = self.seed
            ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ salt.wrapping_mul(0x1656_67B1_9E37_79F9);
        (splitmix64(key) >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Descriptor at plane point `(x, y)`, written into `out`.
    pub fn sample(&self, x: f64, y: f64, out: &mut [f32]) {
        let (gx, gy) = (x / Self::NOISE_SPACING, y / Self::NOISE_SPACING);
        let (fx, fy) = (gx.floor(), gy.floor());
        let (tx, ty) = (gx - fx, gy - fy);
        let (nx, ny) = (fx as i64, fy as i64);
        for (c, slot) in out.iter_mut().enumerate() {
            let salt = 1 + c as u64;
            let l = |dx: i64, dy: i64| self.hash(nx + dx, ny + dy, salt);
            let top = l(0, 0) * (1.0 - tx) + l(1, 0) * tx;
            let bottom = l(0, 1) * (1.0 - tx) + l(1, 1) * tx;
            *slot = (Self::NOISE_WEIGHT * (top * (1.0 - ty) + bottom * ty)) as f32;
        }

        let (bx, by) = ((x / Self::BLOB_SPACING).floor() as i64, (y / Self::BLOB_SPACING).floor() as i64);
        let two_sigma_sq = 2.0 * Self::BLOB_SIGMA * Self::BLOB_SIGMA;
        for cy in by - 1..=by + 1 {
            for cx in bx - 1..=bx + 1 {
                let px = (cx as f64 + 0.15 + 0.7 * self.hash(cx, cy, 1 << 20)) * Self::BLOB_SPACING;
                let py = (cy as f64 + 0.15 + 0.7 * self.hash(cx, cy, 2 << 20)) * Self::BLOB_SPACING;
                let d2 = (x - px).powi(2) + (y - py).powi(2);
                let falloff = (-d2 / two_sigma_sq).exp();
                if falloff < 1e-6 {
                    continue;
                }
                let amplitude = 0.2 + 0.8 * self.hash(cx, cy, 3 << 20);
                for (c, slot) in out.iter_mut().enumerate() {
                    let w = (self.hash(cx, cy, (4 << 20) + c as u64) - 0.6).max(0.0) * 2.5;
                    *slot += (amplitude * w * falloff) as f32;
                }
            }
        }
    }
}

/// Builds a full pyramid from a per-pixel descriptor function.
pub fn pyramid_from_fn<F>(
    image_id: impl Into<String>,
    width: u32,
    height: u32,
    channels: u32,
    descriptor: F,
) -> Result<FeaturePyramid, PyramidError>
where
    F: Fn(u32, u32, &mut [f32]) + Sync,
{
    let c = channels as usize;
    let mut fine = vec![0f32; width as usize * height as usize * c];
    fine.par_chunks_mut(width as usize * c).enumerate().for_each(|(y, row)| {
        for (x, desc) in row.chunks_exact_mut(c).enumerate() {
            descriptor(x as u32, y as u32, desc);
        }
    });

    let mut grids = vec![(1u32, width, height, fine)];
    for &(stride, _) in LEVELS.iter().rev().skip(1) {
        let (_, pw, ph, prev) = grids.last().expect("non-empty");
        let (w, h) = (width.div_ceil(stride), height.div_ceil(stride));
        debug_assert_eq!(w, pw.div_ceil(2));
        let mut data = vec![0f32; w as usize * h as usize * c];
        for y in 0..h {
            for x in 0..w {
                let dst = (y as usize * w as usize + x as usize) * c;
                for cy in 2 * y..(2 * y + 2).min(*ph) {
                    for cx in 2 * x..(2 * x + 2).min(*pw) {
                        let src = (cy as usize * *pw as usize + cx as usize) * c;
                        for k in 0..c {
                            data[dst + k] = data[dst + k].max(prev[src + k]);
                        }
                    }
                }
            }
        }
        grids.push((stride, w, h, data));
    }

    let levels = grids
        .into_iter()
        .rev()
        .zip(LEVELS.iter())
        .map(|((stride, w, h, data), &(s, name))| {
            debug_assert_eq!(stride, s);
            FeatureLevel::new(name, stride, w, h, channels, data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    FeaturePyramid::new(image_id, width, height, levels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    /// Nominal camera distance to the plane.
    pub distance: f64,
    pub distance_jitter: f64,
    pub max_offset: f64,
    pub max_rotation_deg: f64,
    pub channels: u32,
    pub texture_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_width: 320,
            image_height: 240,
            focal: 300.0,
            distance: 300.0,
            distance_jitter: 12.0,
            max_offset: 24.0,
            max_rotation_deg: 2.0,
            channels: 32,
            texture_seed: 17,
        }
    }
}

/// Cameras looking at a textured plane.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub texture: Texture,
    pub cameras: Vec<PoseRecord>,
}

impl SyntheticScene {
    pub fn generate(spec: SceneSpec, n_images: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cameras = (0..n_images)
            .map(|i| {
                let mut angle = || rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg).to_radians();
                let rotation = Rotation3::from_euler_angles(angle(), angle(), angle()).into_inner();
                let center = Vector3::new(
                    rng.random_range(-spec.max_offset..=spec.max_offset),
                    rng.random_range(-spec.max_offset..=spec.max_offset),
                    -(spec.distance + rng.random_range(-spec.distance_jitter..=spec.distance_jitter)),
                );
                PoseRecord::new(format!("img{i:02}"), rotation, center).expect("proper rotation")
            })
            .collect();
        Self {
            spec,
            texture: Texture::new(spec.texture_seed, spec.channels),
            cameras,
        }
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        let cx = (self.spec.image_width as f64 - 1.0) / 2.0;
        let cy = (self.spec.image_height as f64 - 1.0) / 2.0;
        Matrix3::new(self.spec.focal, 0.0, cx, 0.0, self.spec.focal, cy, 0.0, 0.0, 1.0)
    }

    /// Maps plane coordinates `(x, y)` to pixels of camera `i`.
    pub fn plane_to_image(&self, i: usize) -> Matrix3<f64> {
        let cam = &self.cameras[i];
        let r = cam.rotation;
        let t = -(r * cam.center);
        let mut m = Matrix3::zeros();
        m.set_column(0, &r.column(0));
        m.set_column(1, &r.column(1));
        m.set_column(2, &t);
        self.intrinsics() * m
    }

    /// Maps pixels of camera `i` to pixels of camera `j`.
    pub fn homography(&self, i: usize, j: usize) -> Matrix3<f64> {
        let to_plane = self.plane_to_image(i).try_inverse().expect("camera sees the plane");
        let h = self.plane_to_image(j) * to_plane;
        h / h[(2, 2)]
    }

    pub fn image_name(&self, i: usize) -> &str {
        &self.cameras[i].name
    }

    pub fn pyramid(&self, i: usize) -> FeaturePyramid {
        let to_plane = self.plane_to_image(i).try_inverse().expect("camera sees the plane");
        let texture = self.texture;
        pyramid_from_fn(
            self.image_name(i),
            self.spec.image_width,
            self.spec.image_height,
            self.spec.channels,
            move |u, v, out| {
                let p = project(&to_plane, ImageCoord::new(u as f64, v as f64)).expect("finite plane point");
                texture.sample(p.u, p.v, out);
            },
        )
        .expect("synthetic pyramid is valid")
    }

    /// Reference poses mapped into a reconstruction frame by the inverse of
    /// `registration`, with the centers of `offsets` images displaced (in
    /// reference units) before the mapping. Evaluating the result against
    /// the reference poses recovers exactly those displacements.
    pub fn planted_reconstruction(
        &self,
        registration: &SimilarityTransform,
        offsets: &[(usize, Vector3<f64>)],
    ) -> Vec<PoseRecord> {
        let inverse = SimilarityTransform {
            scale: 1.0 / registration.scale,
            rotation: registration.rotation.transpose(),
            translation: -(registration.rotation.transpose() * registration.translation) / registration.scale,
        };
        self.cameras
            .iter()
            .enumerate()
            .map(|(i, cam)| {
                let mut displaced = cam.clone();
                if let Some((_, d)) = offsets.iter().find(|(k, _)| *k == i) {
                    displaced.center += d;
                }
                apply_to_pose(&inverse, &displaced)
            })
            .collect()
    }
}

/// Paths produced by [`write_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFiles {
    pub pyramid_dir: PathBuf,
    pub reference_poses: PathBuf,
    pub estimated_poses: PathBuf,
    pub registration_list: PathBuf,
    pub target_list: PathBuf,
}

/// Writes pyramids, reference poses, a planted reconstruction and the
/// registration/target image lists for a scene. The last `n_targets`
/// images are targets; each target's estimated center is displaced by
/// `0.5 * (k + 1)` along x.
pub fn write_scene(scene: &SyntheticScene, dir: &Path, n_targets: usize) -> io::Result<SceneFiles> {
    let pyramid_dir = dir.join("pyramids");
    fs::create_dir_all(&pyramid_dir)?;
    for i in 0..scene.cameras.len() {
        let path = pyramid_dir.join(format!("{}.dpyr", scene.image_name(i)));
        save_pyramid(&scene.pyramid(i), &path).map_err(io::Error::other)?;
    }

    let n = scene.cameras.len();
    let first_target = n.saturating_sub(n_targets);
    let offsets: Vec<(usize, Vector3<f64>)> = (first_target..n)
        .enumerate()
        .map(|(k, i)| (i, Vector3::new(0.5 * (k + 1) as f64, 0.0, 0.0)))
        .collect();
    let registration = SimilarityTransform {
        scale: 2.5,
        rotation: Rotation3::from_euler_angles(0.3, -0.1, 0.8).into_inner(),
        translation: Vector3::new(10.0, -4.0, 2.0),
    };

    let files = SceneFiles {
        pyramid_dir,
        reference_poses: dir.join("reference_poses.txt"),
        estimated_poses: dir.join("estimated_poses.txt"),
        registration_list: dir.join("day.txt"),
        target_list: dir.join("night.txt"),
    };
    fs::write(&files.reference_poses, poses_text(&scene.cameras))?;
    fs::write(
        &files.estimated_poses,
        poses_text(&scene.planted_reconstruction(&registration, &offsets)),
    )?;
    let names = |range: std::ops::Range<usize>| -> String { range.map(|i| format!("{}\n", scene.image_name(i))).collect() };
    fs::write(&files.registration_list, names(0..first_target))?;
    fs::write(&files.target_list, names(first_target..n))?;
    Ok(files)
}
