//! Minimal dense tensors with tape-based reverse-mode differentiation, an
//! AdaDelta optimizer, seeded initialisation, and a binary checkpoint format.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); training runs in
//! `f32` and gradient checks in `f64`.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Fault, Gradients, Graph, Var, MASKED_LOG_PROB};
pub use optim::{AdaDelta, AdaDeltaSlot};
pub use params::{GradBuffer, Param, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Graph32<'p> = Graph<'p, f32>;
pub type Graph64<'p> = Graph<'p, f64>;
