//! Experiment runner for the purification lab: configuration, staged runs
//! under one output directory, and report tables.

pub mod config;
pub mod layout;
pub mod pipeline;
pub mod report;
pub mod verify;

pub use config::ExperimentConfig;
pub use pipeline::Run;
pub use report::{Report, ReportRow};
