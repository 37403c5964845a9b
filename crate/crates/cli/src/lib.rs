//! Configuration, file outputs and pipeline stages for the `deimlab` command.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
