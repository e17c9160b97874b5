//! Merging metric reports and summarizing them per config.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use steallab::metrics::{emit_report, read_report, summarize, MetricRow, ReportFormat};

pub const MERGED: &str = "merged.csv";
pub const SUMMARY: &str = "summary.csv";

pub struct Merged {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<MetricRow>,
}

/// Reads every report in order; the summary holds one median row per config fingerprint.
pub fn merge(inputs: &[PathBuf]) -> Result<Merged> {
    if inputs.is_empty() {
        bail!(crate::config::config_error("report needs at least one input file"));
    }
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(read_report(path).with_context(|| format!("in {}", path.display()))?);
    }
    let summary = summarize(&rows);
    Ok(Merged { rows, summary })
}

/// Writes `merged.csv` and `summary.csv` into `out`.
pub fn write(merged: &Merged, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    emit_report(&merged.rows, &out.join(MERGED), ReportFormat::Csv)?;
    emit_report(&merged.summary, &out.join(SUMMARY), ReportFormat::Csv)?;
    Ok(())
}
