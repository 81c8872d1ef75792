//! Single-shot instance segmentation at desk scale.
//!
//! The crate is organised bottom-up: a small reverse-mode autodiff engine
//! ([`autodiff`]), box geometry and anchors, the detection and mask
//! losses, the network, and finally training, inference, evaluation and
//! ablation drivers.

// `!(x >= 0.0)` is how parameter checks reject NaN along with negatives
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod anchors;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod infer;
pub mod losses;
pub mod mask;
pub mod model;
pub mod nn;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
