//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments at an API boundary (dimension mismatch, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical routine left its domain of validity (non-PSD state,
    /// matrix exponential failure, integrator underflow, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Bad or inconsistent data on disk (checksums, versions, manifests).
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code class for the CLI: usage errors are handled by the
    /// argument parser itself (2); data problems map to 3, numerics to 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}
