//! Experiment runner: data generation, file formats, configuration and subcommands.

pub mod checkpoint_file;
pub mod commands;
pub mod config;
pub mod data;
pub mod tensor_file;

pub use commands::{run_command, Cli, Command};
