//! Evaluation harness for the two-stage flow-matching pipeline: metrics
//! judged by the sound-world oracle, the parameter-matched single-stage
//! baseline, experiment runners and the `flowplan` command line.

pub mod baseline;
pub mod cli;
pub mod config;
pub mod experiments;
pub mod heatmap;
pub mod metrics;
pub mod report;

pub use config::Config;
pub use report::{MetricRow, Report};
