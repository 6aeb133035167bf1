use thiserror::Error;

/// Errors produced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A mechanism was asked to run outside the parameter range where its
    /// privacy guarantee holds.
    #[error("outside validity range: {0}")]
    OutOfValidity(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("timestamps out of order: {0}")]
    Ordering(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("privacy budget refused: {0}")]
    BudgetRefused(String),

    #[error("run failed: {0}")]
    RunFailed(String),

    #[error("search failed: all {} trials errored (first: {})", .0.len(), .0.first().map(String::as_str).unwrap_or("-"))]
    SearchFailed(Vec<String>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
