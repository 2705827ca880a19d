use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum NacfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient decay: {0}")]
    InsufficientDecay(String),

    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    #[error("non-finite value produced by op #{op_index} ({op})")]
    NonFinite { op_index: usize, op: &'static str },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, NacfError>;

pub(crate) fn invalid(msg: impl Into<String>) -> NacfError {
    NacfError::InvalidArgument(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> NacfError {
    let path = path.into();
    move |source| NacfError::Io { path, source }
}
