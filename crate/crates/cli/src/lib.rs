//! Experiment driver behind the `colt` binary.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{CliError, CliResult};
pub use config::{Ablation, DatasetSection, ExperimentConfig, DETERMINISTIC_ENV};
