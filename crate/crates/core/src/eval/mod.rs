//! Linear probes, normalized-error aggregation, and the experiment drivers
//! built on them.

mod probe;
mod report;
mod sweep;

pub use probe::{fit_probe, linear_probe, probe_objective, ProbeConfig, ProbeResult, ProbeWeights};
pub use report::{
    aggregate_normalized_error, mean_and_se, AggregateReport, CellRow, ErrorRecord, MethodSummary,
    STL,
};
pub use sweep::{
    mu_distribution_report, noise_dataset_name, noise_robustness_sweep, parallel_map, run_method,
    weighted_probe_comparison, GroupStats, Method, MethodRun, MuSummary, SweepBase, SweepConfig,
    SweepOutcome, SweepRun,
};
