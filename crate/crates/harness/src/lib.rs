//! Experiment harness for the fusion-expression-learning pipeline:
//! flat-file configuration, the training loop, clean-split evaluation,
//! and ablation sweeps, all exposed both as a library and through the
//! `fel` command-line binary.

pub mod ablate;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
