//! Dense `f64` tensors with a linear reverse-mode tape.
//!
//! Every forward primitive records itself on a [`Tape`]; [`Tape::backward`]
//! replays the record in reverse once and leaves `d loss / d tensor` in each
//! tensor's gradient slot. [`grad_check`] is the independent oracle: central
//! finite differences against the tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_with_step, relative_error, GradCheckReport, DEFAULT_STEP, RELATIVE_FLOOR,
};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero dimension")]
    EmptyDimension(Vec<usize>),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("row index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
}
