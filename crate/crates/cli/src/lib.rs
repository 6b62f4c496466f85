//! Library side of the `annotator` binary: configuration and the
//! subcommand implementations.

pub mod commands;
pub mod config;
