//! Experiment commands for the rfwnet detector: gradient checks, box-loss
//! sensitivity curves, training, evaluation, the loss-weight ablation,
//! attention export and parameter counts.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RFWNetConfig;
pub use error::{CliError, CliResult};
