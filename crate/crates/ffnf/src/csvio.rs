//! CSV export for matrices, vectors, and benchmark reports.
//!
//! No header, LF line terminator, values printed in Rust's shortest
//! round-trip decimal form so an f64 parse reproduces them exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{IoError, Result};
use ffnf_core::dependency::DependencyMatrix;
use ffnf_core::latency::BenchReport;

pub fn format_rows(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in rows {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

pub fn export_rows(rows: &[Vec<f64>], path: &Path) -> Result<()> {
    fs::write(path, format_rows(rows)).map_err(|e| IoError::io(path, e))
}

/// Row i of the export is dropped-block index i.
pub fn export_matrix(matrix: &DependencyMatrix, path: &Path) -> Result<()> {
    let rows: Vec<Vec<f64>> = (0..matrix.m).map(|i| matrix.row(i).to_vec()).collect();
    export_rows(&rows, path)
}

pub fn export_vector(values: &[f64], path: &Path) -> Result<()> {
    export_rows(&[values.to_vec()], path)
}

pub fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| {
            ffnf_core::Error::InvalidArgument(format!("csv line {}: {e}", lineno + 1))
        })?);
    }
    Ok(rows)
}

pub fn load_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_rows(&text)
}

/// Parses a square matrix export back into a DependencyMatrix.
pub fn load_matrix(path: &Path) -> Result<DependencyMatrix> {
    let rows = load_rows(path)?;
    let m = rows.len();
    let mut values = Vec::with_capacity(m * m);
    for row in &rows {
        if row.len() != m {
            return Err(ffnf_core::Error::ShapeMismatch(format!(
                "matrix csv must be square; {m} rows but a row of {} values",
                row.len()
            ))
            .into());
        }
        values.extend_from_slice(row);
    }
    Ok(DependencyMatrix::from_values(m, values)?)
}

/// One row per stage (index, flops, seconds) plus a one-line summary.
pub fn format_report(report: &BenchReport) -> String {
    let mut out = String::new();
    for (i, (secs, flops)) in report
        .stage_seconds
        .iter()
        .zip(&report.stage_flops)
        .enumerate()
    {
        writeln!(out, "{i},{flops},{secs}").expect("string write");
    }
    writeln!(
        out,
        "total={} tokens_per_second={} stages={}",
        report.total_seconds, report.tokens_per_second, report.stage_count
    )
    .expect("string write");
    out
}
