use thiserror::Error;

/// Errors raised by geometry, estimation and harness routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlamError {
    #[error("point is behind the camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },

    #[error("degenerate line: {0}")]
    DegenerateLine(&'static str),

    #[error("degenerate projection: {0}")]
    DegenerateProjection(&'static str),

    #[error("interpretation planes are nearly parallel (angle {angle:.3e} rad)")]
    NearEpipolarPlane { angle: f64 },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),

    #[error("no plane model reached {min_inliers} inliers")]
    NoModelFound { min_inliers: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient observations: have {have}, need {need}")]
    InsufficientObservations { have: usize, need: usize },

    #[error("solver diverged (damping {damping:.3e})")]
    DivergedSolve { damping: f64 },

    #[error("gauge is underconstrained: no fixed pose")]
    GaugeUnderconstrained,

    #[error("pose graph is underconstrained: {0}")]
    Underconstrained(&'static str),

    #[error("landmark {landmark} has no reference keyframe correction")]
    MissingReference { landmark: usize },

    #[error("infeasible scene configuration: {0}")]
    InfeasibleConfig(String),

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(&'static str),

    #[error("trajectory length mismatch: {est} vs {gt}")]
    LengthMismatch { est: usize, gt: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, SlamError>;

impl From<std::io::Error> for SlamError {
    fn from(e: std::io::Error) -> Self {
        SlamError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for SlamError {
    fn from(e: serde_json::Error) -> Self {
        SlamError::Config(e.to_string())
    }
}
