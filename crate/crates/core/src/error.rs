use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (largest jitter tried: {max_jitter:e})")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("persistence error: {0}")]
    Persistence(String),

    #[error("numerical consistency error: {0}")]
    Numerical(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line driver: 2 for usage, data and
    /// file problems, 3 for numerical or training failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Ingestion { .. } | Error::Config(_) | Error::Persistence(_) | Error::Io(_) => 2,
            Error::NotPositiveDefinite { .. }
            | Error::NonFinite(_)
            | Error::Training { .. }
            | Error::Numerical(_)
            | Error::Domain(_) => 3,
        }
    }
}
