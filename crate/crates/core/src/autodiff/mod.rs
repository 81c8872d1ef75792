//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records operations as they execute. [`Graph::backward`]
//! replays the gradient rules in reverse recording order from a scalar
//! output and accumulates into every node that requires a gradient.
//! Graphs are single-threaded; values move between threads as plain
//! [`Tensor`](crate::tensor::Tensor)s.

mod conv;
pub mod gradcheck;
mod graph;
mod ops;

pub use conv::{
    conv2d_backward, conv2d_forward, conv_transpose2x2_backward, conv_transpose2x2_forward,
    Conv2dGeometry, ConvTransposeGeometry,
};
pub use graph::{Backward, Graph, Var};
pub use ops::{broadcast_shape, sigmoid, ElementwiseKind};
