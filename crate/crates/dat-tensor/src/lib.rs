//! Minimal dense tensor library: the exact operation set a deformable
//! attention backbone needs, reverse-mode automatic differentiation over a
//! recorded graph, and a finite-difference gradient checker.
//!
//! Tensors are immutable row-major buffers; `Graph` records each op and
//! `Graph::backward` replays the tape to accumulate gradients into
//! `requires_grad` leaves.

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod scalar;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::Graph;
pub use kernels::{denormalize, gelu_value, hat};
pub use scalar::{DType, Scalar};
pub use tensor::{strides, Tensor};
