use std::fmt::Write as _;

use serde::Serialize;

use super::metrics::{MetricsReport, PAPER_IPS};
use crate::error::Result;

/// Published accuracies (%) shown above measured runs.
pub const REFERENCE_ROWS: [(&str, f64); 5] = [
    ("baseline-1", 91.69),
    ("baseline-2", 79.36),
    ("baseline-3", 93.0),
    ("baseline-4", 93.49),
    ("LeViT-MC (reported)", 96.6),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(crate::Error::InvalidInput(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Serialize)]
struct NamedReport<'a> {
    name: &'a str,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

/// Renders named runs. Markdown gives an accuracy table with the reference
/// rows first; an empty run list gives just the header.
pub fn emit_report(runs: &[(&str, &MetricsReport)], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let named: Vec<NamedReport> = runs.iter().map(|&(name, report)| NamedReport { name, report }).collect();
            Ok(serde_json::to_string_pretty(&named)? + "\n")
        }
        ReportFormat::Markdown => Ok(markdown(runs)),
    }
}

fn markdown(runs: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::from("| Study | Accuracy |\n|---|---|\n");
    if runs.is_empty() {
        return out;
    }
    for (name, acc) in REFERENCE_ROWS {
        let _ = writeln!(out, "| {name} | {acc:.2}% |");
    }
    for (name, r) in runs {
        let _ = writeln!(out, "| {name} | {:.2}% |", r.accuracy * 100.0);
    }
    let timed: Vec<_> = runs.iter().filter_map(|(n, r)| r.throughput.as_ref().map(|t| (n, t))).collect();
    if !timed.is_empty() {
        out.push_str("\n| Study | Images/s | Std | Stage-2 skip rate |\n|---|---|---|---|\n");
        let _ = writeln!(out, "| LeViT-MC (reported) | {PAPER_IPS:.1} | - | - |");
        for (name, t) in timed {
            let _ = writeln!(
                out,
                "| {name} | {:.1} | {:.1} | {:.3} |",
                t.images_per_second_mean, t.images_per_second_std, t.stage2_skip_rate
            );
        }
    }
    out
}
