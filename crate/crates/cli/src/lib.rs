//! Command implementations behind the `dmsc` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::RunConfig;
pub use error::{CliError, Result};
