//! Command-line harness: dataset generation, feature-network pretraining,
//! training, evaluation and single-image distortion.

pub mod commands;
pub mod config;
pub mod run;

pub use commands::CliError;
pub use config::{emit_config, parse_config, ConfigBuilder, ConfigError, ExperimentConfig};
