//! Experiment harness: configs, built-in tasks, runs, sweeps and reports.

pub mod config;
pub mod report;
pub mod run;
pub mod tasks;

pub use config::{CombineMode, ExperimentConfig, ScorerSpec};
pub use report::{ArmSummary, MetricRow, RunSummary};
pub use run::{run, sweep, RunOutput};
