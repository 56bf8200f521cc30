//! Config, checkpoint and report formats of the command-line tool, and the
//! subcommands built on them.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;

pub use checkpoint::{Checkpoint, Provenance};
pub use commands::{Analysis, Overrides};
pub use config::{Command, ExperimentConfig, LoadedConfig};
