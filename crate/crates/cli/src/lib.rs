//! Command implementations behind the `sekit` binary.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{load_config, RunConfig};
pub use error::{CliError, CliResult};
