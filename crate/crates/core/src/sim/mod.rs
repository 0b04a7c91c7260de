//! Two-stage simulation experiments.

mod family;
mod harness;
mod report;

pub use family::{Family, GenerativeSpec};
pub use harness::{
    run_two_stage, run_two_stage_with_jobs, CoordinateRecord, ExperimentConfig, RandomizationMode,
    RegimeSpec, ReplicationRecord,
};
pub use report::{
    coverage_report, ks_distance_uniform, pooled_pivots, read_pivots_csv, regime_sweep, summarize,
    two_sample_ks, uniformity_report, write_records_csv, CoverageReport, ExperimentSummary,
    SweepRow, UniformityReport, CSV_COLUMNS, CSV_VERSION_LINE,
};
