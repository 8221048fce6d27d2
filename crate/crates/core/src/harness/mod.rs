//! Experiment orchestration: configuration schema and validation, the
//! cached pipeline behind the CLI, and report/plot emission.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod svg;

pub use config::{ExperimentConfig, Preset};
pub use pipeline::{bundle_hash, Pipeline, ReportBundle};
pub use report::{emit_report, ReportFormat};
