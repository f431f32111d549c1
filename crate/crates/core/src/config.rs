//! Pipeline configuration, stored as JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::verify::{MultiHomographyParams, RansacParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Level matched exhaustively.
    pub coarse_level: String,
    /// Level refined from the coarse matches; must be the coarse level's
    /// immediate child.
    pub fine_level: String,
    /// Relocalization window side.
    pub k_window: u32,
    pub ransac_threshold_px: f64,
    pub max_homographies: usize,
    pub min_inliers_per_model: usize,
    pub ransac_max_iters: usize,
    pub ransac_confidence: f64,
    /// Per-image pair budget for export; `None` keeps every pair.
    pub best_n_pairs: Option<usize>,
    /// Ask the reconstruction backend to keep intrinsics fixed. Meant to be
    /// set together with `best_n_pairs` on scenes with repetitive structure.
    pub fixed_intrinsics: bool,
    pub rng_seed: u64,
    pub pair_list: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            coarse_level: "conv4_pool".into(),
            fine_level: "conv3_pool".into(),
            k_window: 2,
            ransac_threshold_px: 10.0,
            max_homographies: 5,
            min_inliers_per_model: 15,
            ransac_max_iters: 2000,
            ransac_confidence: 0.999,
            best_n_pairs: None,
            fixed_intrinsics: false,
            rng_seed: 0,
            pair_list: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.coarse_level.is_empty() || self.fine_level.is_empty() {
            return bad("level names must be non-empty".into());
        }
        if self.coarse_level == self.fine_level {
            return bad("coarse and fine level must differ".into());
        }
        if self.k_window == 0 {
            return bad("k_window must be positive".into());
        }
        if !(self.ransac_threshold_px > 0.0 && self.ransac_threshold_px.is_finite()) {
            return bad(format!("ransac_threshold_px {}", self.ransac_threshold_px));
        }
        if self.max_homographies == 0 || self.min_inliers_per_model == 0 || self.ransac_max_iters == 0 {
            return bad("max_homographies, min_inliers_per_model and ransac_max_iters must be positive".into());
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return bad(format!("ransac_confidence {} not in (0, 1)", self.ransac_confidence));
        }
        if self.best_n_pairs == Some(0) {
            return bad("best_n_pairs must be positive when set".into());
        }
        Ok(())
    }

    pub fn verification_params(&self) -> MultiHomographyParams {
        MultiHomographyParams {
            ransac: RansacParams {
                threshold: self.ransac_threshold_px,
                max_iters: self.ransac_max_iters,
                confidence: self.ransac_confidence,
            },
            max_models: self.max_homographies,
            min_inliers: self.min_inliers_per_model,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.coarse_level, "conv4_pool");
        assert_eq!(c.fine_level, "conv3_pool");
        assert_eq!(c.k_window, 2);
        assert_eq!(c.ransac_threshold_px, 10.0);
        assert_eq!(c.max_homographies, 5);
        assert_eq!(c.best_n_pairs, None);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = PipelineConfig {
            best_n_pairs: Some(5),
            fixed_intrinsics: true,
            ..Default::default()
        };
        assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = PipelineConfig::from_json(r#"{"best_n_pairs": 5}"#).unwrap();
        assert_eq!(partial.best_n_pairs, Some(5));
        assert_eq!(partial.max_homographies, 5);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_json(r#"{"k_window": 0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"best_n_pairs": 0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"ransac_threshold_px": -1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"unknown": 1}"#).is_err());
    }
}
