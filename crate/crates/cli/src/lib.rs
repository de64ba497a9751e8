//! Experiment runner behind the `fedgain` binary.

pub mod commands;
pub mod config;
pub mod svg;

pub use commands::{execute, CliError, Command, Overrides};
pub use config::{ConfigError, ExperimentConfig};
