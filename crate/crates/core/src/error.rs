use crate::trace::Address;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Parameters invalid for a family (wrong length, non-finite, out of range).
    #[error("parameter error: {0}")]
    Param(String),

    /// A value passed to a gradient computation lies outside the support.
    #[error("value outside support: {0}")]
    Support(String),

    /// Vector length mismatch between a store and a direction or score.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    /// Address reuse with a different family, or an address unknown to the store.
    #[error("structural error at {address}: {message}")]
    Structural { address: Address, message: String },

    /// A linear solve or estimator produced a non-finite result.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Model code failed; `address` is the last ERP site reached before the failure.
    #[error("program error{}: {message}", .address.as_ref().map(|a| format!(" after {a}")).unwrap_or_default())]
    Program {
        address: Option<Address>,
        message: String,
    },

    /// Exhaustive enumeration refused because the trace space is too large
    /// or contains a continuous ERP.
    #[error("enumeration refused: {0}")]
    Enumeration(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn program(message: impl Into<String>) -> Self {
        Error::Program {
            address: None,
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
