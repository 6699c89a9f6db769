//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The crate provides exactly the operations the defect-synthesis networks
//! need (elementwise math with broadcasting, reductions, 2-D convolutions and
//! their adjoints, matrix products) and differentiates them to any order.

pub mod branches;
pub mod kernels;
mod tensor;
mod var;

pub use tensor::{broadcast_shape, Tensor};
pub use var::{grad, sigmoid, Var};
