//! Config-driven experiment runner over the elastic-infogan library:
//! parse an experiment file, execute its variant x seed grid, and emit
//! metrics, tables, image grids, and prior trajectories as plain files.

pub mod artifacts;
pub mod config;
pub mod runner;

pub use config::{parse_experiment_config, ExperimentConfig, SplitSelector};
pub use runner::{report, run, RunManifest, RunMetrics};
