//! Nested Monte Carlo estimation of CoVaR for derivative portfolios.

pub mod config;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod market;
pub mod pricing;
pub mod rng;
pub mod smoothers;

pub use error::{Error, Result};
