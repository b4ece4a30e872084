pub mod autodiff;
pub mod benchmark;
pub mod bijector;
pub mod config;
pub mod copula;
pub mod data;
pub mod dgp;
pub mod estimators;
pub mod frugal;
pub mod marginal;
pub mod propensity;
pub mod error;
pub mod rng;
pub mod serialize;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
