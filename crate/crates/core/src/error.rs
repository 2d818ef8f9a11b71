use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LockitError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LockitError {
    #[error("degenerate cloud: {0}")]
    DegenerateCloud(String),

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("feature backend unavailable for scan '{0}'")]
    BackendUnavailable(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("map has no nodes")]
    EmptyMap,

    #[error("retrieval depth {b} exceeds map size {nodes}")]
    BTooLarge { b: usize, nodes: usize },

    #[error("all particle weights are zero")]
    AllZeroWeights,

    #[error("particle set is empty")]
    EmptySet,

    #[error("degenerate registration geometry: {0}")]
    DegenerateGeometry(String),

    #[error("no correspondences within the gating distance")]
    EmptyCorrespondences,

    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),

    #[error("no consensus: best model has {0} inliers")]
    NoConsensus(usize),

    #[error("degenerate motion: consecutive poses coincide")]
    DegenerateMotion,

    #[error("extent too small: {0}")]
    ExtentTooSmall(String),

    #[error("world generation failed: {0}")]
    WorldGeneration(String),

    #[error("trajectory too short: need at least {needed} poses, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("run stopped early: {0}")]
    Aborted(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: bad file format: {message}")]
    Format { path: PathBuf, message: String },
}

impl LockitError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LockitError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LockitError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        LockitError::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
