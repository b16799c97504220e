//! Config-driven case-study runner: parses experiment files, wires the
//! generate / train / simulate / estimate pipeline end to end, and emits
//! deterministic CSV artifacts and summary metrics.

mod config;
mod emit;
mod run;

pub use config::{ConfigError, ExperimentConfig};
pub use emit::{
    read_summary, write_loss_csv, write_loss_csv_smoothed, write_summary, write_trajectory_csv,
};
pub use run::{
    compare_runs, filter_only, resolve_out_dir, run_case_study, train_only, CompareReport,
    ExperimentError, RunOptions, RunSummary, OUT_ROOT_ENV,
};
