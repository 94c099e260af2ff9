//! Dense tensors and a reverse-mode gradient tape.
//!
//! The tape is a Wengert list: every primitive appends a node holding its
//! forward value and the indices of its inputs, so the node order is already
//! topological. [`Tape::backward`] walks it in reverse and accumulates
//! gradients into every leaf created with `requires_grad`.

mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, tape_grad_check};
pub use scalar::{Element, Precision};
pub use tape::{Activation, BinaryOp, Operand, Padding, Resample, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero extent")]
    EmptyExtent(Vec<usize>),
    #[error("expected a one-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value at flat index {index} ({context})")]
    NonFinite { context: String, index: usize },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("{0}")]
    InvalidArgument(String),
}
