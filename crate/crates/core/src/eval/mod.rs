//! Cascade accuracy, throughput benchmarking and report rendering.

mod bench;
mod metrics;
mod report;

pub use bench::{bench_throughput, ThroughputReport, MIN_REPETITIONS};
pub use metrics::{evaluate, score, ClassMetrics, ConfusionMatrix, MetricsReport, References, PAPER_ACCURACY, PAPER_IPS};
pub use report::{emit_report, ReportFormat, REFERENCE_ROWS};
