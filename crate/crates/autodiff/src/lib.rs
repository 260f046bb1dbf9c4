//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Graph`] as they execute; [`Graph::backward`]
//! replays their adjoints in reverse order. Only the operations a small
//! two-tower transformer needs are provided, each covered by the
//! finite-difference checker in [`gradcheck`].

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var, NORM_EPS};
pub use tensor::Tensor;
