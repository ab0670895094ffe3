//! Command-line front end for the hallucination experiments.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::{parse_seed_list, ExperimentConfig};
pub use error::CliError;
