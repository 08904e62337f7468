use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box (cx={cx}, cy={cy}, w={w}, h={h}): width and height must be finite and positive")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64 },

    #[error("{targets} targets exceed the {queries} available queries")]
    TooManyTargets { targets: usize, queries: usize },

    #[error("class {class} is outside [0, {num_classes})")]
    InvalidClass { class: usize, num_classes: usize },

    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },

    #[error("cost weights must be nonnegative with at least one strictly positive")]
    InvalidCostWeights,

    #[error("assignment mismatch: {0}")]
    AssignmentMismatch(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("invalid teacher score {0}: must lie in (0, 1]")]
    InvalidScore(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}: duplicate scene id `{scene_id}` on line {line}")]
    DuplicateSceneId { path: PathBuf, scene_id: String, line: usize },

    #[error("match logs are not comparable: {0}")]
    EpochMismatch(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
