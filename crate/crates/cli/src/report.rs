//! Rendering of reports: JSON documents, CSV tables and plain-text tables.

use std::io::Write;
use std::path::Path;

use lpfa::data::{format_number, SCHEMA_VERSION};
use lpfa::metrics::IntervalMatrix;
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Text,
}

/// A finite number as a JSON number; infinities and NaN as the strings
/// `inf`, `-inf` and `nan`.
pub fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(format_number(v))
    }
}

pub fn matrix(m: &DMatrix<f64>) -> Value {
    Value::Array(
        m.row_iter()
            .map(|r| Value::Array(r.iter().map(|&v| num(v)).collect()))
            .collect(),
    )
}

pub fn vector(v: &DVector<f64>) -> Value {
    Value::Array(v.iter().map(|&x| num(x)).collect())
}

/// Starts a report object with the schema version and command name.
pub fn document(command: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    m.insert("command".into(), json!(command));
    m
}

/// Writes `text` to `path`, or stdout when no path is given.
pub fn emit(text: &str, path: Option<&Path>) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::input(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Failure::input(format!("cannot write to stdout: {e}")))
        }
    }
}

pub fn json_text(doc: Map<String, Value>) -> String {
    let mut s = serde_json::to_string_pretty(&Value::Object(doc)).expect("serialisable report");
    s.push('\n');
    s
}

/// Right-aligned plain-text table.
pub fn text_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(
                |(i, (c, &w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                },
            )
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn fixed(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        format_number(v)
    }
}

/// A labelled matrix as a text table.
pub fn matrix_table(row_names: &[String], col_names: &[String], m: &DMatrix<f64>) -> String {
    let mut header = vec![String::new()];
    header.extend(col_names.iter().cloned());
    let rows: Vec<Vec<String>> = row_names
        .iter()
        .enumerate()
        .map(|(r, name)| {
            let mut row = vec![name.clone()];
            row.extend(m.row(r).iter().map(|&v| fixed(v)));
            row
        })
        .collect();
    text_table(&header, &rows)
}

/// `(l, u)` with ASCII infinities, e.g. `(-inf, inf)`.
pub fn interval(l: f64, u: f64) -> String {
    format!("({}, {})", fixed(l), fixed(u))
}

/// Estimates with intervals, starred where the interval excludes zero.
pub fn interval_table(
    row_names: &[String],
    col_names: &[String],
    estimate: &DMatrix<f64>,
    ci: &IntervalMatrix,
) -> String {
    let sig = ci.significant();
    let mut header = vec![String::new()];
    header.extend(col_names.iter().cloned());
    let rows: Vec<Vec<String>> = row_names
        .iter()
        .enumerate()
        .map(|(r, name)| {
            let mut row = vec![name.clone()];
            for c in 0..estimate.ncols() {
                let star = if sig[(r, c)] { "*" } else { " " };
                row.push(format!(
                    "{}{star} {}",
                    fixed(estimate[(r, c)]),
                    interval(ci.lower[(r, c)], ci.upper[(r, c)])
                ));
            }
            row
        })
        .collect();
    text_table(&header, &rows)
}

pub fn interval_json(ci: &IntervalMatrix) -> Value {
    json!({
        "lower": matrix(&ci.lower),
        "upper": matrix(&ci.upper),
        "significant": Value::Array(
            ci.significant()
                .row_iter()
                .map(|r| Value::Array(r.iter().map(|&b| json!(b)).collect()))
                .collect()
        ),
    })
}

/// Long-format interval CSV: one row per loading.
pub fn write_interval_csv(
    path: &Path,
    row_names: &[String],
    col_names: &[String],
    estimate: &DMatrix<f64>,
    ci: &IntervalMatrix,
) -> Result<(), Failure> {
    let io = |e: std::io::Error| Failure::input(format!("cannot write {}: {e}", path.display()));
    let mut f = std::fs::File::create(path).map_err(io)?;
    writeln!(f, "# schema_version={SCHEMA_VERSION}").map_err(io)?;
    let sig = ci.significant();
    let mut w = csv::Writer::from_writer(f);
    let csv_err = |e: csv::Error| Failure::input(format!("cannot write {}: {e}", path.display()));
    w.write_record(["variable", "factor", "estimate", "lower", "upper", "significant"])
        .map_err(csv_err)?;
    for (r, rn) in row_names.iter().enumerate() {
        for (c, cn) in col_names.iter().enumerate() {
            w.write_record([
                rn.clone(),
                cn.clone(),
                format_number(estimate[(r, c)]),
                format_number(ci.lower[(r, c)]),
                format_number(ci.upper[(r, c)]),
                sig[(r, c)].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io)
}
