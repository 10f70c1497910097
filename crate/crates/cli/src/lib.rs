//! Experiment orchestration for the reward-tilted diffusion laboratory:
//! strict configuration parsing, seeded experiment dispatch, and CSV/JSON
//! result emission.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{load_config, ConfigError, ExperimentConfig};
pub use runner::{run, ExperimentKind, RunError, RunSummary};
