//! Experiment orchestration: configuration, pipelines, metrics and reports.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;

pub use config::{ExperimentConfig, Pipeline};
pub use experiment::{run_experiment, Outcome, Report};
pub use metrics::{balanced_accuracy, Metrics};
