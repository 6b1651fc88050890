//! Experiment harness for `pbrl-core`: configuration, seeded batch runs,
//! lossless trace persistence, summaries, plot data and the `pbrl` CLI.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod num;
pub mod persist;
pub mod plot;
pub mod runner;
pub mod summary;

pub use config::{Algorithm, ConfigPatch, Experiment, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use runner::{run_experiment, write_outputs, ExperimentResult};
