//! Experiment driver: configuration, run directories and subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use config::ExperimentConfig;
pub use error::CliError;
