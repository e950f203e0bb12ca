use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of maps, kernels or layers do not fit together.
    #[error("topology error: {0}")]
    Topology(String),

    /// A value or argument outside its allowed range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// NaN/Inf or runaway values during a computation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed or truncated binary file.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn topology<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Topology(msg.into()))
}
