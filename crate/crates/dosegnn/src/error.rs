//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range on axis {axis} (dim {dim})")]
    IndexOutOfRange {
        axis: usize,
        index: usize,
        dim: usize,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("structure mask '{0}' has no true voxel")]
    EmptyMask(String),

    #[error("plan bundle: {0}")]
    Bundle(String),

    #[error("graph construction: {0}")]
    Graph(String),

    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite loss at epoch {epoch}, plan {plan}")]
    NonFiniteLoss { epoch: usize, plan: usize },

    #[error("model '{model}' incompatible with plan '{plan}': {detail}")]
    Incompatible {
        model: String,
        plan: String,
        detail: String,
    },

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::NonFiniteLoss { .. } => 4,
            _ => 3,
        }
    }
}
