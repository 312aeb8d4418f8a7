//! Per-run telemetry CSV and the run comparison table.
//!
//! Schema (fixed):
//! `iter,l_dmd,l_reg,l_diff,l_dis,l_gen,grad_norm_phi,grad_norm_branch,w2_snapshot,mmd_snapshot`
//! The two snapshot columns are empty on iterations without a snapshot.
//! Floats print in Rust's shortest round-trip form, so identical runs
//! produce byte-identical files.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::CollapseMonitor;

pub const CSV_HEADER: &str =
    "iter,l_dmd,l_reg,l_diff,l_dis,l_gen,grad_norm_phi,grad_norm_branch,w2_snapshot,mmd_snapshot";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub l_dmd: f64,
    pub l_reg: f64,
    pub l_diff: f64,
    pub l_dis: f64,
    pub l_gen: f64,
    pub grad_norm_phi: f64,
    pub grad_norm_branch: f64,
    pub w2_snapshot: Option<f64>,
    pub mmd_snapshot: Option<f64>,
}

impl MetricsRow {
    fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.l_dmd,
            self.l_reg,
            self.l_diff,
            self.l_dis,
            self.l_gen,
            self.grad_norm_phi,
            self.grad_norm_branch,
            opt(self.w2_snapshot),
            opt(self.mmd_snapshot),
        )
    }

    /// Numeric cells in column order (snapshot gaps skipped), for
    /// cross-run difference accounting.
    fn numeric_cells(&self) -> Vec<f64> {
        let mut v = vec![
            self.iter as f64,
            self.l_dmd,
            self.l_reg,
            self.l_diff,
            self.l_dis,
            self.l_gen,
            self.grad_norm_phi,
            self.grad_norm_branch,
        ];
        if let Some(x) = self.w2_snapshot {
            v.push(x);
        }
        if let Some(x) = self.mmd_snapshot {
            v.push(x);
        }
        v
    }
}

/// Append-only CSV writer; the header goes out at creation.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(Self { out })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_line())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn parse_field(line_no: usize, name: &str, s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| {
        Error::config(
            format!("metrics line {line_no}"),
            format!("bad {name} value {s:?}"),
        )
    })
}

/// Parse metrics CSV text. The header must match the schema exactly.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::config(
                "metrics header",
                format!("schema mismatch: got {h:?}"),
            ))
        }
        None => return Err(Error::config("metrics", "empty file")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 10 {
            return Err(Error::config(
                format!("metrics line {}", i + 1),
                format!("expected 10 fields, got {}", parts.len()),
            ));
        }
        let iter = parts[0]
            .parse::<u64>()
            .map_err(|_| Error::config(format!("metrics line {}", i + 1), "bad iter"))?;
        let opt = |s: &str, name: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(parse_field(i + 1, name, s)?))
            }
        };
        rows.push(MetricsRow {
            iter,
            l_dmd: parse_field(i + 1, "l_dmd", parts[1])?,
            l_reg: parse_field(i + 1, "l_reg", parts[2])?,
            l_diff: parse_field(i + 1, "l_diff", parts[3])?,
            l_dis: parse_field(i + 1, "l_dis", parts[4])?,
            l_gen: parse_field(i + 1, "l_gen", parts[5])?,
            grad_norm_phi: parse_field(i + 1, "grad_norm_phi", parts[6])?,
            grad_norm_branch: parse_field(i + 1, "grad_norm_branch", parts[7])?,
            w2_snapshot: opt(parts[8], "w2_snapshot")?,
            mmd_snapshot: opt(parts[9], "mmd_snapshot")?,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("metrics", format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text)
}

/// One run fed into the comparison.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub label: String,
    pub alpha_weak: Option<f64>,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub label: String,
    pub alpha_weak: Option<f64>,
    pub rows: usize,
    pub final_iter: u64,
    pub final_l_dmd: f64,
    pub final_l_diff: f64,
    pub best_w2: Option<f64>,
    pub final_w2: Option<f64>,
    pub collapse_flag: bool,
    /// Max absolute difference over all shared numeric cells vs run 0.
    pub max_abs_diff_vs_first: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub summaries: Vec<RunSummary>,
    /// Aligned per-iteration table (CSV text): iter plus l_dmd / l_diff /
    /// w2 columns per run.
    pub aligned_csv: String,
    /// Human-readable summary table.
    pub table: String,
}

/// Align runs on iteration index, summarize finals, and flag collapse per
/// run with the given monitor settings.
pub fn compare_runs(traces: &[RunTrace], collapse_threshold: f64, collapse_patience: usize) -> Result<Comparison> {
    if traces.is_empty() {
        return Err(Error::config("compare", "no runs given"));
    }
    let mut aligned = String::from("iter");
    for t in traces {
        let _ = write!(aligned, ",l_dmd[{0}],l_diff[{0}],w2[{0}]", t.label);
    }
    aligned.push('\n');
    let max_rows = traces.iter().map(|t| t.rows.len()).max().unwrap_or(0);
    for i in 0..max_rows {
        let iter = traces
            .iter()
            .filter_map(|t| t.rows.get(i))
            .map(|r| r.iter)
            .next()
            .unwrap_or(i as u64);
        let _ = write!(aligned, "{iter}");
        for t in traces {
            match t.rows.get(i) {
                Some(r) => {
                    let w2 = r.w2_snapshot.map(|v| v.to_string()).unwrap_or_default();
                    let _ = write!(aligned, ",{},{},{}", r.l_dmd, r.l_diff, w2);
                }
                None => aligned.push_str(",,,"),
            }
        }
        aligned.push('\n');
    }

    let first = &traces[0];
    let mut summaries = Vec::with_capacity(traces.len());
    for t in traces {
        let mut monitor = CollapseMonitor::new(collapse_threshold, collapse_patience);
        let mut best_w2: Option<f64> = None;
        let mut final_w2 = None;
        for r in &t.rows {
            if let Some(w2) = r.w2_snapshot {
                monitor.observe(w2);
                best_w2 = Some(best_w2.map_or(w2, |b: f64| b.min(w2)));
                final_w2 = Some(w2);
            }
        }
        let mut max_diff = 0.0f64;
        for (a, b) in first.rows.iter().zip(&t.rows) {
            for (x, y) in a.numeric_cells().iter().zip(b.numeric_cells().iter()) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
        if first.rows.len() != t.rows.len() {
            max_diff = f64::INFINITY;
        }
        let last = t.rows.last();
        summaries.push(RunSummary {
            label: t.label.clone(),
            alpha_weak: t.alpha_weak,
            rows: t.rows.len(),
            final_iter: last.map_or(0, |r| r.iter),
            final_l_dmd: last.map_or(f64::NAN, |r| r.l_dmd),
            final_l_diff: last.map_or(f64::NAN, |r| r.l_diff),
            best_w2,
            final_w2,
            collapse_flag: monitor.fired(),
            max_abs_diff_vs_first: max_diff,
        });
    }

    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<24} {:>10} {:>8} {:>12} {:>12} {:>12} {:>12} {:>9} {:>14}",
        "run", "alpha_weak", "rows", "final_l_dmd", "final_l_diff", "best_w2", "final_w2", "collapse", "max_diff_vs_0"
    );
    for s in &summaries {
        let aw = s.alpha_weak.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            table,
            "{:<24} {:>10} {:>8} {:>12.6} {:>12.6} {:>12} {:>12} {:>9} {:>14.3e}",
            s.label,
            aw,
            s.rows,
            s.final_l_dmd,
            s.final_l_diff,
            fmt_opt(s.best_w2),
            fmt_opt(s.final_w2),
            s.collapse_flag,
            s.max_abs_diff_vs_first,
        );
    }

    Ok(Comparison {
        summaries,
        aligned_csv: aligned,
        table,
    })
}
