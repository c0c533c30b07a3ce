//! Experiment runner: configuration, the end-to-end extraction pipeline,
//! parameter sweeps and the artifact layout on disk.

pub mod cli;
pub mod config;
pub mod data;
pub mod persist;
pub mod pipeline;
pub mod sweep;
pub mod theorem;

pub use config::ExperimentConfig;
pub use pipeline::{run_experiment, RunOutcome, Stage, StageError};
