//! Sample-quality metrics and paired multi-sampler reports.

mod metrics;
mod report;

pub use metrics::{kid_paired, median_bandwidth, min_cost_assignment, mode_coverage, rbf_mmd, wasserstein2_2d};
pub use report::{build_report, EvalContext, EvalSampler, EvalSettings, MetricReport, MetricRow, CSV_HEADER};
