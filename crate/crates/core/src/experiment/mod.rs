//! Config-driven experiment runs and ablations.

mod config;
mod runner;

pub use config::{ClMethod, DataSource, ExperimentConfig, ExperimentKind, DATA_DIR_ENV};
pub use runner::{run_experiment, validate_resources, RunOutput};
