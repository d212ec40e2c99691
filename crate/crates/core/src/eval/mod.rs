//! Subject-specific cross-validation, evaluation metrics, report assembly,
//! subspace projections and the synthetic dataset generator.

mod harness;
mod metrics;
pub mod projection;
pub mod report;
pub mod synth;

pub use harness::{
    prepare_subject, project_fold, run_experiment, run_fold, run_subject_experiment, ExperimentRun, FoldOutcome, LeakageAudit,
    RunOptions, SubjectWindows,
};
pub use metrics::{acceptance_rate, accuracy, exclusion_by_family, exclusion_rate, mean_confidence};
pub use projection::{export_projection, write_projection_csv, ProjectedPoint, Subspace};
pub use report::{aggregate_report, format_cell, format_table, read_report_csv, write_report_csv, ExperimentReport, FoldRecord};
pub use synth::{generate_synthetic_dataset, SyntheticSpec};
