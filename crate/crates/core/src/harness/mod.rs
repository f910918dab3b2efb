//! Configuration, persistence and the command-line driver.

pub mod cache;
pub mod cli;
pub mod config;
pub mod experiments;
pub mod output;

pub use cli::cli_main;
pub use config::ExperimentConfig;
