//! Reinforcement learning for token-by-token sequence generation.
//!
//! A small transformer policy is trained on synthetic language tasks with
//! PPO, A2C or NLPO against a KL-regularized task reward, with the n-gram
//! and diversity metrics used to evaluate the generations.

pub mod algos;
pub mod cli;
pub mod data;
pub mod env;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod reward;
pub mod vocab;

pub use error::{Error, Result};
