//! Constrained causal optimization for multi-environment data.

pub mod bench;
pub mod env_data;
pub mod error;
pub mod identify;
pub mod linalg;
pub mod objectives;
pub mod optimizer;
pub mod predictors;
pub mod rng;

pub use error::{CocoError, Result};
