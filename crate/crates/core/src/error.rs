//! Error taxonomy shared across the crate.

use thiserror::Error;

/// Errors surfaced by the public API.
///
/// Internal graph construction panics on programmer errors (mismatched
/// shapes deep inside a composed graph); the public entry points validate
/// their inputs and return one of these instead.
#[derive(Debug, Error)]
pub enum FelError {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A hyperparameter or configuration value is out of range.
    #[error("config error: {0}")]
    Config(String),

    /// A caller-facing contract was violated (e.g. non-simplex input).
    #[error("contract error: {0}")]
    Contract(String),

    /// An argument is malformed (non-finite values, empty input).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric failure that must not be reported as a silent Inf/NaN.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Dataset-level problem (e.g. an empty class).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint container is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FelError>;
