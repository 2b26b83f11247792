pub mod agent;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fixtures;
pub mod geospatial;
pub mod gradient_suite;
pub mod neural;
pub mod persist;
pub mod pipeline;
pub mod reward;
pub mod seed;

pub use error::{Error, Result};
