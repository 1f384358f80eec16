//! Residual learning for vehicle state prediction: an extended kinematic
//! model corrected by a deep-kernel multi-task sparse variational GP.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dataset;
pub mod deep_kernel;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod mtgp;
pub mod predictor;

pub use error::{Error, Result};
