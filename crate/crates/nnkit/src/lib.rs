//! Minimal dense-tensor and reverse-mode autodiff kernel.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); training runs in
//! 32-bit and gradient verification in 64-bit.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckOptions};
pub use graph::{Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
