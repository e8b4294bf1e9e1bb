//! Instance-aware prompt learning on a miniature transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, tape autodiff, finite-difference checking
//! - [`model`]: the transformer language model (causal or masked)
//! - [`ipl`]: the prompt module — learnable prompt tokens, instance-aware
//!   gating, and the plain prompt-tuning baseline
//! - [`tasks`]: synthetic classification / generation data and cloze
//!   formatting with verbalizers
//! - [`train`]: optimizer, training loop, evaluation, checkpoints
//! - [`analysis`]: gate exports, gate-similarity statistics, prompt-length
//!   sweeps

pub mod analysis;
pub mod error;
pub mod ipl;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod train;

pub use error::{CheckpointError, Error, Result};
