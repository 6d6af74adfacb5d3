//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
///
/// The variants are grouped by how a caller should react: `Config`,
/// `Contract`, `Domain`, `Range`, `Format` and `Io` indicate bad inputs;
/// `Divergence` and `Training` indicate a numerical failure mid-run.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (parameter ranges, incompatible modes).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API contract (shape mismatch, missing data).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A query outside the covered range (no extrapolation).
    #[error("range error: {0}")]
    Range(String),

    /// A non-finite state was produced during integration.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// Training produced a non-finite loss.
    #[error("training failure at step {step}: {detail}")]
    Training { step: usize, detail: String },

    /// Every sample in a batch run failed.
    #[error("batch failure: {0}")]
    BatchFailure(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad inputs rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::Divergence { .. } | Error::Training { .. } | Error::BatchFailure(_)
        )
    }
}
