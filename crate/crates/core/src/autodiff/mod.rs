//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every evaluation (define-by-run). Operations
//! append nodes in creation order, so the backward sweep simply walks the
//! node list in reverse. Reductions accumulate left to right over the
//! row-major index, which keeps results bit-reproducible.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Gradients, Graph, NodeId, OpKind, Param, ParamId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
