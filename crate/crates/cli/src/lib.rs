//! Config-driven experiments on top of `bm_core`: dataset caches,
//! training runs, attack sweeps, SoftMax surfaces, σ and λ sweeps, and
//! foreign-data confidence.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod svg;

pub use config::{config_hash, Experiment, ExperimentConfig};
pub use error::{CliError, Result};
