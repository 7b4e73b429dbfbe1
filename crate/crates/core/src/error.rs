use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value produced by `{op}` (tape node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("non-finite value: {0}")]
    NonFiniteValue(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
