//! Meta-learned Bayesian optimization and bandit search for uplink open-loop
//! power control over a multi-cell MIMO simulator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod context;
pub mod error;
pub mod gp;
pub mod harness;
pub mod linalg;
pub mod meta_bo;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
