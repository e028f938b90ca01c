//! CSV report emission.
//!
//! Every file starts with `#`-prefixed header lines carrying the format
//! version, the library digest and the effective configuration as JSON.
//!
//! Schemas:
//! - metric table: `domain,<method>...`, one row per domain, a final `h-mean` row
//! - contribution matrix: `test_domain,<adapter>...`; empty cells are absent or below the display threshold
//! - pairs: `<x>,<y>`, one row per observation
//! - sweep: `top_k,temperature,h_mean`

use std::io::{Read, Write};

use serde::Serialize;

use super::{ContributionMatrix, MetricTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportHeader {
    pub format_version: u32,
    pub library_digest: String,
    pub config: serde_json::Value,
}

impl ReportHeader {
    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "# format_version: {}", self.format_version)?;
        writeln!(w, "# library_digest: {}", self.library_digest)?;
        writeln!(w, "# config: {}", self.config)?;
        Ok(())
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<report>", e)
}

fn csv_err(e: csv::Error) -> Error {
    Error::structural(format!("csv: {e}"))
}

fn fmt_value(v: f64) -> String {
    format!("{v:.6}")
}

pub fn write_metric_table_csv(mut w: impl Write, header: &ReportHeader, table: &MetricTable) -> Result<()> {
    header.write(&mut w).map_err(io_err)?;
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["domain".to_string()];
    head.extend(table.methods.iter().cloned());
    out.write_record(&head).map_err(csv_err)?;
    for (d, row) in table.domains.iter().zip(&table.values) {
        let label = if table.excluded.contains(d) {
            format!("({d})")
        } else {
            d.clone()
        };
        let mut rec = vec![label];
        rec.extend(row.iter().map(|v| fmt_value(*v)));
        out.write_record(&rec).map_err(csv_err)?;
    }
    let mut rec = vec!["h-mean".to_string()];
    rec.extend(table.h_means()?.into_iter().map(fmt_value));
    out.write_record(&rec).map_err(csv_err)?;
    out.flush().map_err(io_err)
}

pub fn write_contribution_csv(
    mut w: impl Write,
    header: &ReportHeader,
    matrix: &ContributionMatrix,
    threshold: Option<f64>,
) -> Result<()> {
    header.write(&mut w).map_err(io_err)?;
    let matrix = match threshold {
        Some(t) => matrix.masked(t),
        None => matrix.clone(),
    };
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["test_domain".to_string()];
    head.extend(matrix.cols.iter().cloned());
    out.write_record(&head).map_err(csv_err)?;
    for (r, row) in matrix.rows.iter().zip(&matrix.cells) {
        let mut rec = vec![r.clone()];
        rec.extend(row.iter().map(|c| c.map(fmt_value).unwrap_or_default()));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads a contribution CSV (header comments are skipped; empty cells become `None`).
pub fn read_contribution_csv(r: impl Read) -> Result<ContributionMatrix> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let head = rdr.headers().map_err(csv_err)?.clone();
    let cols: Vec<String> = head.iter().skip(1).map(str::to_owned).collect();
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(rec.get(0).unwrap_or_default().to_owned());
        let row = rec
            .iter()
            .skip(1)
            .map(|c| {
                if c.trim().is_empty() {
                    Ok(None)
                } else {
                    c.trim()
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::structural(format!("`{c}` is not a number")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != cols.len() {
            return Err(Error::structural("contribution row length differs from header"));
        }
        cells.push(row);
    }
    Ok(ContributionMatrix { rows, cols, cells })
}

pub fn write_pairs_csv(
    mut w: impl Write,
    header: &ReportHeader,
    names: (&str, &str),
    pairs: &[(f64, f64)],
) -> Result<()> {
    header.write(&mut w).map_err(io_err)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record([names.0, names.1]).map_err(csv_err)?;
    for (x, y) in pairs {
        out.write_record([format!("{x:.9}"), format!("{y:.9}")]).map_err(csv_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn write_sweep_csv(
    mut w: impl Write,
    header: &ReportHeader,
    cells: &[(usize, f64, f64)],
) -> Result<()> {
    header.write(&mut w).map_err(io_err)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["top_k", "temperature", "h_mean"]).map_err(csv_err)?;
    for (k, tau, h) in cells {
        out.write_record([k.to_string(), format!("{tau}"), fmt_value(*h)])
            .map_err(csv_err)?;
    }
    out.flush().map_err(io_err)
}
