//! Small dense tensors and a single-owner reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value (shape plus row-major data). Differentiable
//! computation happens on a [`Graph`], which evaluates every op eagerly and
//! records it so that [`Graph::backward`] can replay the chain rule in reverse.
//! Everything is generic over [`Real`] so the same network code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod real;
pub mod suite;
mod tensor;
pub mod tnsr;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
