//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid request: mismatched dimensions, out-of-range parameters,
    /// a missing tag head, and similar caller mistakes.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Noise calibration could not reach the requested budget inside the
    /// search bracket.
    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed dataset or results file.
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn calibration(msg: impl Into<String>) -> Self {
        Error::Calibration(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
