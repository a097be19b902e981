//! Dense tensors and a reverse-mode tape, sized for desk-scale convolutional
//! and attention networks.
//!
//! Storage is `f32` for training and inference; the same graph code runs on
//! `f64` for gradient verification. All reductions accumulate in `f64` with a
//! fixed order, so a forward pass is a deterministic function of its inputs,
//! and samples of a batch never interact outside training-mode batch norm.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, InputReport};
pub use graph::{BatchStats, Graph, Var, BN_EPS};
pub use real::Real;
pub use tensor::{Tensor, MAX_RANK};
