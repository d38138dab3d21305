use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (shape mismatches, bad presets, non-divisible grids).
    #[error("configuration error: {0}")]
    Config(String),
    /// Domain error on an operation input (non-finite values, empty vectors).
    #[error("domain error: {0}")]
    Domain(String),
    /// A numeric computation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Internal state integrity violated (duplicate ids, out-of-order frames).
    #[error("integrity error: {0}")]
    Integrity(String),
    /// Command-line / experiment-spec usage error.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Failed to parse a config, scenario, or results file.
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
