//! Dense feature matching frontend for structure from motion.
//!
//! Pyramids of per-cell descriptors are matched exhaustively on a coarse
//! level, refined one level down, relocalized to pixel positions through the
//! descriptor norms of finer levels, and verified with repeated homography
//! RANSAC. Verified matches are exported in the text format an incremental
//! SfM backend reads, and estimated poses can be scored against a reference.

pub mod archive;
pub mod config;
pub mod eval;
pub mod export;
pub mod homography;
pub mod matching;
pub mod pipeline;
pub mod pyramid;
pub mod relocalize;
pub mod synth;
pub mod verify;

pub use archive::{ArchiveError, ImageInfo, MatchArchive, PairRecord};
pub use config::{ConfigError, PipelineConfig};
pub use eval::{
    angular_error, apply_to_pose, evaluate_poses, fit_similarity, positional_error, threshold_sweep, EvalError,
    EvaluationReport, PoseError, PoseRecord, SimilarityTransform, SweepRow,
};
pub use export::{build_export_graph, dedupe_keypoints, write_feature_and_match_files, ExportError, ExportManifest};
pub use homography::{estimate_homography_dlt, project, symmetric_transfer_error};
pub use matching::{coarse_to_fine_match, match_distance, mutual_nn_match, MatchError, MatchSet, TentativeMatch};
pub use pipeline::{cmd_evaluate, cmd_export, cmd_match, PipelineError};
pub use pyramid::{
    load_pyramid, read_pyramid, save_pyramid, write_pyramid, CellCoord, FeatureLevel, FeaturePyramid, ImageCoord,
    PyramidError,
};
pub use relocalize::{relocalize, RelocalizeError, RelocalizedKeypoint, Relocalizer};
pub use verify::{
    homography_ransac, multi_homography_ransac, rank_pairs, Correspondence, HomographyModel, MultiHomographyParams,
    RansacParams, RetainedPairs, VerifiedPair, VerifyError,
};
