//! Configuration, orchestration and persistence for `pressure-lab` runs.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run_bowen, run_measure, run_pressure_scan, run_validators};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
