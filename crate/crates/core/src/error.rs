use thiserror::Error;

/// Errors raised by the simulators, statistics and restoration code.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameter combination (bad sizes, counts, factors).
    #[error("configuration error: {0}")]
    Config(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Operation not supported for the given input (e.g. profile kind).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A numerical procedure failed (non-finite values, divergence).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed serialized data.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
