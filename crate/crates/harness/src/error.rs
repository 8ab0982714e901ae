//! Error taxonomy for the experiment harness.

use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the harness library and CLI.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// A config file could not be parsed or failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Training produced a non-finite loss and was aborted.
    #[error(
        "training diverged: non-finite loss {value} at epoch {epoch}, step {step}"
    )]
    Diverged { epoch: u64, step: usize, value: f64 },

    /// A checkpoint is incompatible with the configured model geometry.
    #[error("checkpoint incompatible with config: {0}")]
    Incompatible(String),

    /// An unknown sweep name was requested.
    #[error("unknown sweep {0:?}; expected one of k, noise, smoothing, loss-setup, rb-setup, lambda")]
    UnknownSweep(String),

    /// Failure bubbled up from the core pipeline.
    #[error(transparent)]
    Core(#[from] fel_core::error::FelError),

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
