//! Two-stream windowed cross-attention feature learning with anchor-based
//! reliability balancing, on a minimal reverse-mode autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major f64 tensors and small numeric helpers;
//! - [`tape`]: eager reverse-mode autodiff with fused attention/norm ops;
//! - [`gradcheck`]: finite-difference verification, independent of the tape;
//! - [`rng`]: deterministic seed-derived random substreams;
//! - [`nn`]: parameter store and layers (linear, norms, dropout, MLP);
//! - [`optim`]: Adam with exponential per-epoch learning-rate decay;
//! - [`checkpoint`]: a versioned binary tensor container;
//! - [`encoder`]: multi-level windowed cross-attention feature fusion;
//! - [`reliability`]: anchors, attentive correction and label refinement;
//! - [`loss`]: classification, anchor-separation and compactness losses;
//! - [`datagen`]: synthetic two-stream datasets with augmentation and
//!   label-noise/smoothing utilities;
//! - [`metrics`]: evaluation metrics and cluster-quality scores;
//! - [`model`]: the full assembly used by the training harness.
//!
//! Everything is deterministic given a seed: random state comes only from
//! [`rng`] substreams, training is single-threaded, and no iteration order
//! depends on hashing.

pub mod checkpoint;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod reliability;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{FelError, Result};
