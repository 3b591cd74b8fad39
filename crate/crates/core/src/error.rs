use std::path::PathBuf;

use gp_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label map has no valid (non-ignore) pixels")]
    AllIgnored,
    #[error("non-finite {what} at epoch {epoch}, step {step}: {detail}")]
    NonFinite { what: String, epoch: usize, step: usize, detail: String },
    #[error("frozen segmenter parameter changed: {0}")]
    FreezeViolation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite {0}")]
    MissingPrerequisite(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("PNG error on {path}: {msg}")]
    Png { path: PathBuf, msg: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GpError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> GpError {
    let path = path.into();
    move |source| GpError::Io { path, source }
}
