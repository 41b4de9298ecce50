//! Scenario runner for the `fbsde-core` estimators: TOML configuration,
//! CSV and binary output, and the subcommands behind the `fbsde` binary.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{derive_seed, Job, RunError, Stream};
pub use config::{build_model, Config, ConfigError};
