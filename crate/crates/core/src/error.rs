//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Manifest / dataset problems (missing files, bad records, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Image decode/encode or pixel-level preprocessing failures.
    #[error("image error: {0}")]
    Image(String),

    /// Checkpoint container problems (magic, version, truncation, shapes).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A metric is undefined for the given inputs (e.g. single-class AUROC).
    #[error("metric undefined: {0}")]
    Metric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
