//! Synthetic scenes, observation rendering, trajectory metrics and the
//! experiment pipeline that ties the back end together.

pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod scene;

pub use metrics::{compute_ate, compute_ate_poses, AlignmentMode, TrajectoryFile, TrajectoryMetrics};
pub use pipeline::{
    relocalization_ape, run_experiment, run_single, sign_test_p, write_artifacts, ExperimentConfig, PipelineMode,
    RunOutcome, RunRecord,
};
pub use render::{render_observations, ObservationSet, RenderConfig};
pub use scene::{generate_scene, SceneConfig, SyntheticScene, TimedPose, TrajectoryKind};
