pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod rng;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
