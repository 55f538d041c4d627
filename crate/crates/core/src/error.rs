use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numeric kernel, the model, and the I/O helpers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("label {label} out of range 0..={max}")]
    LabelOutOfRange { label: usize, max: usize },
    #[error("click at point {point_index} (object {object_id}) is invalid: {reason}")]
    InvalidClick {
        point_index: usize,
        object_id: usize,
        reason: String,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("missing gradient slot for `{0}`")]
    MissingGradient(String),
    #[error("root of backward pass must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("no prototypes available")]
    NoPrototypes,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scene generation infeasible: {0}")]
    Infeasible(String),
    #[error("scene format error at line {line}: {message}")]
    SceneFormat { line: usize, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("loss is not finite at epoch {epoch}, scene {scene}")]
    NonFiniteLoss { epoch: usize, scene: usize },
    #[error("loss function is not deterministic under a frozen seed")]
    NonDeterministic,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
