//! Reverse-mode automatic differentiation for the small convolutional
//! networks used by the translation model.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! values it produced. Calling [`Tape::backward`] on a scalar node returns the
//! gradient of that scalar with respect to every differentiable node.
//!
//! The engine is generic over [`Float`], so the same network code runs in
//! `f32` for training and in `f64` when gradients are compared against
//! finite differences.

mod float;
mod kernels;
mod tape;
mod tensor;

pub use float::Float;
pub use tape::{sigmoid, softplus, Grads, Tape, Var};
pub use tensor::Tensor;
