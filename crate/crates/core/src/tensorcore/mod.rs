//! Reverse-mode autodiff on a flat tape, sized for MLP/attention workloads.
//!
//! Values are dense row-major tensors of rank 1 or 2. A [`Tape`] records the
//! forward graph; [`Tape::backward`] replays it in reverse and accumulates
//! gradients into per-node buffers. The tape is generic over the scalar type
//! so the same operator derivatives serve the f32 training path and the f64
//! shadow path used by the gradient checker.

mod adagrad;
mod element;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use adagrad::{adagrad_step, Adagrad};
pub use element::Element;
pub use gradcheck::{grad_check, grad_check_verbose, GradCheckReport};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

/// Structured failures from graph construction, execution and optimization.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {dims:?} ({why})")]
    BadShape {
        op: &'static str,
        dims: Vec<usize>,
        why: &'static str,
    },
    #[error("{op}: index {index} out of range for dimension of size {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {dims:?}")]
    NonScalarLoss { dims: Vec<usize> },
    #[error("tensor data length {len} does not match shape {dims:?}")]
    LengthMismatch { len: usize, dims: Vec<usize> },
}
