//! Hard-mining loss for margin-based softmax heads.
//!
//! The crate provides the base losses (softmax cross-entropy, multiplicative
//! angular margin, additive angular margin) with analytic gradients, the
//! hard-mining wrapper that re-weights them, a small deterministic dense-net
//! trainer, a synthetic identity dataset and a pair-verification benchmark.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hard_mining;
pub mod losses;
pub mod math;
pub mod objective;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
