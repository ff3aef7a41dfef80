//! Command-line front end for `itergp`: CSV ingestion with standardised
//! train/test splits, hyperparameter fitting, pathwise prediction and
//! sampling, solver comparisons, latent-Kronecker cost sweeps and a
//! Thompson-sampling demo.
//!
//! Every subcommand resolves its arguments into a [`RunConfig`], writes it to
//! `config.json` next to its outputs and can be replayed from that file.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod output;
pub mod thompson;

pub use commands::{run, RunSummary};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
