//! Experiment runner for the `nonlocal-acf` library: TOML configs in, per-point CSV
//! and JSON reports out, and manifests that run a whole suite.

pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod run;

pub use config::{Claim, ExperimentConfig};
pub use error::{CliError, Result};
pub use manifest::{verify_all, RunOptions, SuiteSummary};
pub use report::Report;
pub use run::run;
