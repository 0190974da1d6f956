//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Model layers record their forward computation on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar loss returns exact gradients for every
//! parameter leaf.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::{linear_resample_weights, ConvSpec, PadMode};
pub use params::ParamStore;
pub use tape::{GradSink, Gradients, Tape, Var};
pub use tensor::Tensor;
