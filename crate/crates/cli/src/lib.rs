//! Command-line front end for `tubekit`: configuration handling and the
//! subcommands behind the `tubekit` binary.

pub mod commands;
pub mod config;
