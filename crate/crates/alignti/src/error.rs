//! Shared error type and exit-code mapping.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A computation left the numeric domain (NaN/inf) or received
    /// non-finite input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Structurally valid input that the operation cannot meaningfully
    /// process (e.g. zero instruction positions).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Checkpoint or dataset file is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 for config/contract problems, 3 for numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Bail with [`Error::Contract`] when `cond` is false.
#[macro_export]
macro_rules! contract {
    ($cond:expr, $($arg:tt)*) => {
        if !($cond) {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}

/// Bail with [`Error::Config`] when `cond` is false.
#[macro_export]
macro_rules! config_check {
    ($cond:expr, $($arg:tt)*) => {
        if !($cond) {
            return Err($crate::error::Error::Config(format!($($arg)*)));
        }
    };
}
