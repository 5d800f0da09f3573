use thiserror::Error;

/// Error type shared across the crate.
///
/// `Invalid` covers bad inputs (malformed data files, shape mismatches,
/// out-of-range spans, unknown config keys); `Numerical` covers failures of
/// the arithmetic itself (singular matrices, non-finite losses, divergence).
/// The CLI maps the two to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
