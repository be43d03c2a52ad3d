use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum HalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}` in header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    BadCell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("input has a header but no data rows")]
    EmptyBody,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate response: {0}")]
    DegenerateResponse(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{failed} of {total} replications failed, above the allowed {allowed}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        allowed: usize,
    },
}

impl HalError {
    /// True for errors caused by bad user input rather than a runtime or numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HalError::Io { .. }
                | HalError::Csv(_)
                | HalError::MissingColumn(_)
                | HalError::BadCell { .. }
                | HalError::EmptyBody
                | HalError::InvalidArgument(_)
                | HalError::DimensionMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, HalError>;
