//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Built for small CPU-bound models: every tensor is a contiguous row-major
//! buffer, matrix products go through `matrixmultiply`, and convolutions are
//! lowered to im2col + GEMM.

mod conv;
pub mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;
mod tensor;

pub use ops::{sigmoid_f64, softplus_f64};
pub use tensor::{Gradients, Tensor};
