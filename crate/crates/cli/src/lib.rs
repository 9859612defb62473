//! Driver for editing runs: configuration, snapshots, the four verbs and
//! their report files.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod snapshot;

pub use config::RunConfig;
pub use error::CliError;
