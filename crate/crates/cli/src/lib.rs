//! Command-line front end for the `ssmlora` crate: configuration files,
//! adapter checkpoints and CSV/JSON reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use commands::{run, Cli, Command, Outcome};
pub use error::{CliError, CliResult};
