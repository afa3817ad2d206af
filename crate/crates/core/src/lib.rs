//! Core library for an occasion-aware conversion-rate prediction toolkit.

pub mod seed;
pub mod tensorcore;

pub use tensorcore::{Tape, Tensor, TensorError};
