//! Large and moderate deviations for small-noise stochastic Volterra equations
//! and rough volatility models: kernels, fractional calculus, deterministic limit
//! equations, simulation, rate functions, implied-volatility asymptotics and
//! Monte Carlo checks.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod frac;
pub mod grid;
pub mod iv;
pub mod kernels;
pub mod models;
pub mod rate;
pub mod sim;
pub mod special;
pub mod verify;
pub mod volterra;
pub mod weights;

pub use error::{Error, Result};
pub use grid::{GridFunction, TimeGrid};
pub use kernels::KernelSpec;
pub use models::{Dynamics, ModelSpec, ScalingRegime};
