//! Counterfactual learning to rank from logged clicks, with a safety term that
//! keeps the learned policy close to the logging policy in exposure space.

pub mod click;
pub mod data;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod experiment;
pub mod policy;
pub mod propensity;
pub mod supervised;
pub mod training;

pub use error::{Error, Result};
