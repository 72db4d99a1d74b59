//! Minimal reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Graph`] is a write-once tape: builder methods validate shapes, run the
//! forward kernel eagerly, and record the op. [`Graph::backward`] seeds a
//! scalar loss with 1.0 and replays the tape in reverse. Everything is
//! single-threaded and allocation order is fixed, so identical inputs give
//! bitwise-identical values and gradients.

mod graph;
mod kernels;
mod tensor;

pub use graph::{CustomOp, Graph, NodeId};
pub use tensor::Tensor;

/// Stability floor added to the mean square inside RMS normalization.
pub const RMS_EPS: f64 = 1e-8;

/// Base for rotary position frequencies.
pub const ROPE_THETA: f64 = 10000.0;
