//! Command-line driver: config files, ablation sweeps and result tables.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod sweep;

pub use commands::run;
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use report::{emit_report, Report, ReportRow};
pub use sweep::{run_sweep, Axis, SweepSpec};
