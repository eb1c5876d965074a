//! Dense tensors and a reverse-mode autodiff graph that supports
//! differentiating through gradients (needed for gradient penalties).

pub mod autograd;
pub mod nn;
mod ops;
pub mod optim;
mod scalar;
mod tensor;

pub use autograd::{grad, grad_enabled, grad_or_zeros, no_grad, with_grad_mode, Var};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::{ConvGeom, Result, SpatialMap, Tensor, TensorError};
