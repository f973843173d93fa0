pub mod aam;
pub mod baselines;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod fl;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
