//! Experiment runner behind the `ann` binary.

pub mod annt;
pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::CliError;
