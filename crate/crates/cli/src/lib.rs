//! Batch runner: dataset generation, training, evaluation, grid search and
//! the Monte-Carlo reproduction, with CSV/JSON artifacts.
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_evaluate, cmd_generate, cmd_grid_search, cmd_reproduce, cmd_train};
pub use config::{ExperimentConfig, Scale};
pub use error::CliError;
