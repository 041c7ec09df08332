//! Experiment runner for the `stablab` library: TOML configs in, CSV, JSON
//! and plot data out.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{load_inputs, parse_inputs, Command, Env, Invocation};
pub use config::ExperimentConfig;
pub use error::CliError;
pub use output::OutputSet;
