//! File formats, checkpoints, run directories and the `imind` command line.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod mkt;
pub mod run;

pub use error::{CliError, CliResult, ExitKind};
