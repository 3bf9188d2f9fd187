//! Operator surface for the generation pipeline: dataset generation, staged
//! training, sampling, evaluation, backbone ablation and plots.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

pub use config::RunConfig;
pub use error::{error_kind, CliError};
