//! Command layer of the `apolab` binary: artifact formats, metrics files and
//! the subcommand implementations.

pub mod commands;
pub mod error;
pub mod metrics;
pub mod persist;

pub use error::{CliError, Result};
