//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor math, the model, tasks, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape is malformed (zero extent, rank out of 1..=3, length mismatch).
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Backward was called on a node that is not a scalar.
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A token id falls outside the vocabulary.
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Vocabulary { id: u32, vocab_size: usize },

    /// A sequence does not fit in the model's position budget.
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    /// A positional index is out of bounds.
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// Every instance token was marked invalid; the gate mean is undefined.
    #[error("degenerate instance: no valid tokens to average over")]
    DegenerateInstance,

    /// Every loss mask weight is zero; the objective is undefined.
    #[error("degenerate objective: all mask weights are zero")]
    DegenerateObjective,

    /// A configuration value is inconsistent or out of range.
    #[error("config error: {0}")]
    Config(String),

    /// The training loss became non-finite.
    #[error("training diverged: non-finite loss at step {step}")]
    TrainingDiverged { step: u64 },

    /// Checkpoint serialization or deserialization failed.
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Distinct failure classes when loading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic: expected \"IPLC\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated checkpoint: {context}")]
    Truncated { context: &'static str },

    #[error("checkpoint tensor {name:?} has shape {found:?}, config implies {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
