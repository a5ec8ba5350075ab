//! Library side of the `sws` command: subcommands, run manifests and the
//! train-then-evaluate pipeline shared with the acceptance tests.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod selftest;

pub use commands::{run, Cli, Command};
pub use error::{CliError, Result};
