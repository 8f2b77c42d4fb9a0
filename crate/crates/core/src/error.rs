use thiserror::Error;

use crate::floatsim::FloatFormat;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid float format: {0}")]
    InvalidFormat(String),

    #[error("{value} overflows {format} (max finite {max})")]
    Overflow {
        value: f64,
        format: FloatFormat,
        max: f64,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("{value} is not representable in {format}")]
    NotRepresentable { value: f64, format: FloatFormat },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(format!("csv: {e}"))
    }
}

impl Error {
    /// Numerical failures (as opposed to bad inputs or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Overflow { .. } | Error::NonFinite(_))
    }
}
