use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by estimation, simulation and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid roll-call data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bootstrap failed: {dropped} of {total} replicates did not converge")]
    BootstrapDropout { dropped: usize, total: usize },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("plot rendering failed: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, Error>;
