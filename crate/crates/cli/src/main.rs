use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use densesfm::eval::{REPORT_ANGLE_DEG, REPORT_THRESHOLDS_M};
use densesfm::pipeline::{cmd_evaluate, cmd_export, cmd_match, EvaluateInputs, MatchOptions, PipelineError};
use densesfm::synth::{write_scene, SceneSpec, SyntheticScene};
use densesfm::PipelineConfig;

/// Dense feature matching frontend for structure from motion.
#[derive(Debug, Parser)]
#[command(name = "densesfm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load_config(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.rng_seed = seed;
        }
        Ok(config)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Match, relocalize and verify pairs of pyramids into a match archive.
    Match {
        /// Directory of `.dpyr` pyramid files.
        pyramid_dir: PathBuf,
        /// Pair list, one `image_a image_b` per line (default: all pairs).
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Worker threads (default: one per core).
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Write keypoint, match and pair files for the reconstruction backend.
    Export {
        /// Match archive written by `match`.
        archive: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Register estimated poses onto reference poses and score target images.
    Evaluate {
        #[arg(long)]
        estimated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Images used to register the estimate (day images).
        #[arg(long)]
        day: PathBuf,
        /// Images scored after registration (night images).
        #[arg(long)]
        night: PathBuf,
        /// Position thresholds in meters.
        #[arg(long, value_delimiter = ',', default_values_t = REPORT_THRESHOLDS_M)]
        thresholds: Vec<f64>,
        /// Orientation threshold in degrees.
        #[arg(long, default_value_t = REPORT_ANGLE_DEG)]
        angle: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write the effective configuration as JSON.
    ExtractConfig {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic planar scene with pyramids and poses.
    Synth {
        #[arg(long, default_value_t = 5)]
        images: usize,
        /// Trailing images listed as targets instead of registration images.
        #[arg(long, default_value_t = 2)]
        targets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "scene")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Match {
            pyramid_dir,
            pairs,
            jobs,
            common,
        } => {
            let config = common.load_config()?;
            let outcome = cmd_match(&pyramid_dir, &config, &MatchOptions { pairs, jobs }, &common.out)?;
            let verified = outcome.archive.records.iter().filter(|r| r.verified.total_inliers > 0).count();
            println!(
                "matched {} pair(s), {} with verified matches, {} failed; archive {}",
                outcome.archive.records.len() + outcome.failures.len(),
                verified,
                outcome.failures.len(),
                outcome.archive_path.display()
            );
            for f in &outcome.failures {
                eprintln!("pair {} {} failed: {}", f.image_a, f.image_b, f.reason);
            }
            Ok(outcome.is_success())
        }
        Command::Export { archive, common } => {
            let config = common.load_config()?;
            let manifest = cmd_export(&archive, &config, &common.out)?;
            println!(
                "exported {} image(s), {} match(es) to {}",
                manifest.feature_files.len(),
                manifest.match_count,
                common.out.display()
            );
            Ok(true)
        }
        Command::Evaluate {
            estimated,
            reference,
            day,
            night,
            thresholds,
            angle,
            out,
        } => {
            let report = cmd_evaluate(
                &EvaluateInputs {
                    estimated_poses: &estimated,
                    reference_poses: &reference,
                    registration_list: &day,
                    target_list: &night,
                    position_thresholds: &thresholds,
                    angle_threshold_deg: angle,
                },
                &out,
            )?;
            print!("{}", report.sweep_csv());
            println!(
                "reconstructed {}/{} target and {}/{} registration images",
                report.targets_reconstructed,
                report.targets_total(),
                report.registration_reconstructed,
                report.registration_total
            );
            Ok(true)
        }
        Command::ExtractConfig { common } => {
            let config = common.load_config()?;
            config.validate()?;
            write_file(&common.out, "config.json", &(config.to_json() + "\n"))?;
            println!("{}", common.out.join("config.json").display());
            Ok(true)
        }
        Command::Synth {
            images,
            targets,
            seed,
            out,
        } => {
            anyhow::ensure!(images >= 2, "a scene needs at least 2 images");
            let scene = SyntheticScene::generate(SceneSpec::default(), images, seed);
            let files = write_scene(&scene, &out, targets.min(images))
                .with_context(|| format!("writing scene to {}", out.display()))?;
            println!("pyramids in {}", files.pyramid_dir.display());
            Ok(true)
        }
    }
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<PipelineError>() {
                Some(PipelineError::Usage(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
