//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor or layer shapes are incompatible.
    Shape(String),
    /// Invalid configuration (bad file, out-of-range value, missing section).
    Config(String),
    /// A numerical failure such as a NaN loss or a divergent optimizer step.
    Numerical(String),
    /// Malformed input data (CSV rows, container headers, WAV chunks).
    Parse(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration/input problems,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
