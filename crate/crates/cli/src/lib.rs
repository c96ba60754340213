//! Library half of the `seascan` command: experiment configs, the training
//! loop and the subcommand bodies. `main.rs` only parses arguments.

pub mod commands;
pub mod config;
pub mod error;
pub mod train;
