//! Sparse-point-guided depth estimation with multi-scale 2D/3D fusion.

pub mod data;
pub mod depth;
mod error;
pub mod fkaconv;
pub mod geometry;
pub mod gradsuite;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod trainer;

pub use error::{CoreError, Result};
