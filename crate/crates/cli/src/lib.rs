//! Experiment runner around `hotswap-core`: JSON configs in, CSV and JSON
//! artifacts out.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::CliError;
