//! Bayesian neural networks with stochastic inputs, trained by black-box
//! alpha-divergence minimization, and model-based policy search through
//! Monte-Carlo roll-outs of the learned dynamics.

// `!(v > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod bnn;
pub mod checkpoint;
pub mod distributions;
pub mod env;
mod error;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
