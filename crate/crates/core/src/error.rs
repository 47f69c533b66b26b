use std::path::PathBuf;

use circuits_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("series {series_id}: {reason}")]
    InvalidRecord { series_id: String, reason: String },
    #[error("need at least {needed} instances to split, got {got}")]
    TooFewInstances { needed: usize, got: usize },
    #[error("instance {instance}: {what} count {count} exceeds cap {cap}")]
    CapExceeded {
        instance: usize,
        what: &'static str,
        count: usize,
        cap: usize,
    },
    #[error("instance has no queries")]
    EmptyQuerySet,
    #[error("invalid drop set: {0}")]
    InvalidDropSet(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("flow inversion failed to bracket u = {u} within |y| <= {limit:e}")]
    InversionBracket { u: f64, limit: f64 },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
