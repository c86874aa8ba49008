//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("unsupported or malformed image data: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("predicted peak {estimated_mb:.1} MB exceeds the hard budget of {budget_mb} MB")]
    BudgetExceeded { estimated_mb: f64, budget_mb: u64 },

    #[error("weight file is corrupt or inconsistent: {0}")]
    WeightFormat(String),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    pub(crate) fn weights(msg: impl Into<String>) -> Self {
        Error::WeightFormat(msg.into())
    }
}
