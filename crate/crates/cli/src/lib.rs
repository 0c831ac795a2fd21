//! Command-line driver for nested-trial vaccine effectiveness analyses:
//! configuration, file formats and the `vetrial` subcommands.

pub mod commands;
pub mod config;
pub mod io;
pub mod manifest;

pub use commands::{run, Cli};
