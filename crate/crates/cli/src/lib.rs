//! Library side of the `naegen` command, so commands can be driven from tests.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_baseline, cmd_campaign, cmd_generate, cmd_report, cmd_serve, cmd_sweep};
pub use config::{Config, Overrides};
pub use error::CliError;
