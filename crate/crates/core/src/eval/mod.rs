//! Generalization cases crossed with the sensor-failure sweep, aggregated
//! over model and failure seeds.

mod case;
mod failure;
mod pipeline;
mod report;
pub mod stats;

pub use case::{
    accuracy_diff_report, run_case, run_cases, run_cases_with, sweep, AccuracyValue, CaseKind, CaseOutput, CaseResult, CaseSpec, Curve, DiffReport,
    DiffRow, FailureRecord, ModelKey, Runner, SeedSummary, Sessions, ALL_PCTS,
};
pub use failure::{fail_sensors, failed_count, failed_sensors, zero_sensors};
pub use pipeline::{Evaluator, ModelConfigs, ModelKind, TrainedModel};
pub use report::{read_rows, result_rows, rows_to_csv, summarize, write_results, CaseSummary, ResultRow, Summary};
