//! Compositional plan vectors on a crafting grid-world.
//!
//! The crate bundles the environment ([`craftworld`]), the expert and
//! dataset generator ([`planner`]), a small dense numerical core ([`nn`]),
//! the plan-vector model and its losses ([`model`]), the training loop
//! ([`train`]) and the evaluation harness ([`eval`]).
//!
//! Numerical code is generic over [`Scalar`]; training uses `f32` and
//! gradient checks use `f64`. The aliases below name the common
//! instantiations.

pub mod craftworld;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod planner;
pub mod scalar;
pub mod seed;
pub mod train;

pub use error::{CpvError, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Model = model::CpvModel<f32>;
/// Gradient-check precision.
pub type Model64 = model::CpvModel<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
