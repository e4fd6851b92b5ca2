//! Library side of the `transem` command-line tool: argument handling,
//! subcommand implementations and the desk-scale experiment drivers.

pub mod args;
pub mod commands;
pub mod error;
pub mod experiments;
