//! Library surface of the `hmil` command-line tool; the binary in `main.rs`
//! is a thin clap wrapper over [`commands`]. Exposed as a library so tests
//! can call commands directly and inspect [`errors::CliError`] codes.

pub mod commands;
pub mod config;
pub mod errors;
pub mod run;
