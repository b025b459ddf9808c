//! Per-step training log as CSV. Optional cells stay empty rather than
//! carrying sentinels, and floats print in shortest-roundtrip form so a log
//! can be compared bit for bit across runs. Wall time is the one column
//! excluded from such comparisons.

use std::io::Write as _;
use std::path::Path;

use crate::distill::StepMetrics;
use crate::error::{Error, Result};

pub const COLUMNS: &str = "step,loss,lr,delta,masked_frac,collapse,probe_score,wall_ms";

/// Streams training rows to a CSV file, flushing per row so an aborted run
/// still leaves a readable log.
pub struct MetricsWriter {
    out: std::io::BufWriter<std::fs::File>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsWriter {
    /// `normalize` is recorded in a comment line: whether the features seen
    /// by the model were z-scored is part of the run's identity.
    pub fn create(path: impl AsRef<Path>, normalize: bool) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        writeln!(out, "# normalize={normalize}")?;
        writeln!(out, "{COLUMNS}")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    /// Continues an existing log (resumed runs): no header is repeated, so
    /// the concatenation reads as one uninterrupted record.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(MetricsWriter { out: std::io::BufWriter::new(file) })
    }

    pub fn write_row(
        &mut self,
        m: &StepMetrics,
        probe_score: Option<f64>,
        wall_ms: u128,
    ) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{}",
            m.step,
            opt(m.loss),
            m.lr,
            m.delta,
            m.masked_frac,
            opt(m.collapse),
            opt(probe_score),
            wall_ms
        )?;
        self.out.flush()?;
        Ok(())
    }
}

// ── log comparison ──────────────────────────────────────────────────────────

/// True when two logs agree on every column except wall_ms. Returns the
/// first differing line pair for diagnostics.
pub fn logs_match(a: &str, b: &str) -> std::result::Result<(), (String, String)> {
    let strip = |line: &str| -> String {
        match line.rsplit_once(',') {
            Some((head, _)) if !line.starts_with('#') && !line.starts_with("step,") => {
                head.to_string()
            }
            _ => line.to_string(),
        }
    };
    let mut la = a.lines();
    let mut lb = b.lines();
    loop {
        match (la.next(), lb.next()) {
            (None, None) => return Ok(()),
            (x, y) => {
                let xs = x.map(strip).unwrap_or_default();
                let ys = y.map(strip).unwrap_or_default();
                if xs != ys {
                    return Err((x.unwrap_or("<eof>").into(), y.unwrap_or("<eof>").into()));
                }
            }
        }
    }
}

/// Parses one column of a metrics log; empty cells are skipped.
pub fn read_column(text: &str, column: &str) -> Result<Vec<(u64, f64)>> {
    let mut rows = Vec::new();
    let mut col_idx = None;
    for line in text.lines() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if col_idx.is_none() {
            col_idx = Some(
                cells
                    .iter()
                    .position(|c| *c == column)
                    .ok_or_else(|| Error::Data(format!("metrics log has no column {column}")))?,
            );
            continue;
        }
        let idx = col_idx.unwrap();
        let step: u64 = cells
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("unreadable step cell in {line:?}")))?;
        let cell = cells.get(idx).copied().unwrap_or("");
        if cell.is_empty() {
            continue;
        }
        let v: f64 = cell
            .parse()
            .map_err(|_| Error::Data(format!("unreadable {column} cell in {line:?}")))?;
        rows.push((step, v));
    }
    Ok(rows)
}
