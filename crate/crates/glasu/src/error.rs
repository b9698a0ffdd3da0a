//! Error taxonomy shared across the crate.
//!
//! Variants map onto CLI exit codes: configuration errors exit 2, protocol
//! errors exit 3, data errors exit 4.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum GlasuError {
    /// Invalid or inconsistent configuration (bad layer plan, widths, step size gate, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Violation of the client/server wire protocol (bad frame, misaligned rows, ...).
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Malformed or inconsistent dataset files.
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GlasuError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            GlasuError::Config(_) => 2,
            GlasuError::Protocol(_) => 3,
            GlasuError::Data(_) => 4,
            GlasuError::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, GlasuError>;
