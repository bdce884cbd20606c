//! Experiment front-end for FusDom continued pre-training: configuration,
//! checkpoint and report formats, and the recipe runner.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::{parse_config, ExperimentConfig, Recipe};
pub use error::{CliError, Result};
pub use report::{ExperimentReport, Row, SCHEMA_VERSION};
