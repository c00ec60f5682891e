//! Dense CPU tensors with a tape-based reverse-mode autodiff graph.
//!
//! Values are stored contiguously in row-major order. Every differentiable
//! operation lives on [`Graph`], which records the forward computation and
//! replays it backwards in [`Graph::backward`]. The crate is generic over
//! [`Scalar`] so the same model code runs in `f32` for training and `f64`
//! for finite-difference verification.

mod error;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod suite;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use params::{BoundParams, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
