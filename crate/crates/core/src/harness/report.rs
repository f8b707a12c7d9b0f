use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{read_metrics, MetricsRow};
use crate::{Error, Result};

pub const REPORT_COLUMNS: [&str; 10] = [
    "label",
    "coherence",
    "consistency",
    "fluency",
    "relevance",
    "overall",
    "min_dim",
    "spread",
    "mean_length",
    "coverage",
];

/// Final evaluation of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub dims: [f64; 4],
    pub overall: f64,
    pub min_dim: f64,
    pub spread: f64,
    pub mean_length: f64,
    pub coverage: f64,
}

impl ReportRow {
    pub fn from_final(label: String, row: &MetricsRow) -> Self {
        let dims = row.dims();
        ReportRow {
            label,
            dims,
            overall: dims.iter().sum::<f64>() / 4.0,
            min_dim: row.min_dim,
            spread: row.spread(),
            mean_length: row.mean_length,
            coverage: row.coverage,
        }
    }

    fn values(&self) -> [f64; 9] {
        let d = self.dims;
        [
            d[0],
            d[1],
            d[2],
            d[3],
            self.overall,
            self.min_dim,
            self.spread,
            self.mean_length,
            self.coverage,
        ]
    }
}

/// `runs/pro/metrics.csv` is labelled `pro`; a file without a parent
/// directory is labelled by its stem.
pub fn label_for(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn report(files: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if files.is_empty() {
        return Err(Error::config("report needs at least one metrics file"));
    }
    files
        .iter()
        .map(|path| {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let rows = read_metrics(file, path)?;
            let last = rows.last().ok_or_else(|| Error::Parse {
                path: path.clone(),
                line: 1,
                message: "no data rows".into(),
            })?;
            Ok(ReportRow::from_final(label_for(path), last))
        })
        .collect()
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}", REPORT_COLUMNS[0]);
    for c in &REPORT_COLUMNS[1..] {
        let _ = write!(out, " {c:>11}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<width$}", r.label);
        for v in r.values() {
            let _ = write!(out, " {v:>11.4}");
        }
        out.push('\n');
    }
    out
}

pub fn render_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    for r in rows {
        let mut record = vec![r.label.clone()];
        record.extend(r.values().iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::config(e.to_string()))
}
