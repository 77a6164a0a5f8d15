//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! Every op validates shapes, rejects non-finite outputs and records its
//! inputs so [`Tape::backward`] can replay the chain rule. The op set is
//! closed: what the toy transformer, adapters and distillation losses need.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use tape::{log_softmax_values, softmax_values, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by backward; clear it and re-run forward")]
    TapeConsumed,
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("unknown tape node {0}")]
    UnknownVar(usize),
}
