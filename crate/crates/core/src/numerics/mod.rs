//! Dense 64-bit tensors, tape-based reverse-mode differentiation, and
//! finite-difference gradient verification.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, DEFAULT_STEP};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;
