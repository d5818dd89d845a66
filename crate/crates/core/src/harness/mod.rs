//! Config-driven experiment harness: TOML configs, seed/budget grids,
//! aggregation and file export.

mod config;
mod experiment;
mod export;

pub use config::{DatasetConfig, ExperimentConfig, Method, StdMode, TrainProtocol};
pub use experiment::{
    aggregate_runs, build_data, format_percent, run_experiment, AggregateRow, BuiltData, CsvCache,
    ResultRecord, RunResult, RunTiming, TimingRecord,
};
pub use export::{export_results, write_summary};
