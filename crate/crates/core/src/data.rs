//! CSV input and output: raw response matrices, covariance matrices and
//! labelled numeric tables.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::SampleCovariance;

/// Version written into every CSV header comment and JSON report.
pub const SCHEMA_VERSION: u32 = 1;

/// Header label of the row-name column in labelled tables.
pub const ROW_LABEL: &str = "variable";

#[derive(Debug, Clone, PartialEq)]
pub enum DataKind {
    /// N×J observations.
    Raw(DMatrix<f64>),
    Covariance(SampleCovariance),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub variable_names: Vec<String>,
    pub kind: DataKind,
}

impl Dataset {
    pub fn n_variables(&self) -> usize {
        self.variable_names.len()
    }

    pub fn raw(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            DataKind::Raw(x) => Some(x),
            DataKind::Covariance(_) => None,
        }
    }

    /// Sample covariance with divisor N, or N - 1 when `bessel` is set.
    /// `bessel` has no effect on covariance input.
    pub fn sample_covariance(&self, bessel: bool) -> Result<SampleCovariance> {
        match &self.kind {
            DataKind::Raw(x) => SampleCovariance::from_data(x, bessel),
            DataKind::Covariance(s) => Ok(s.clone()),
        }
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn parse_cell(cell: &str, line: u64, col: usize) -> Result<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
        Error::InvalidInput(format!(
            "line {line}, column {}: {cell:?} is not a finite number",
            col + 1
        ))
    })
}

/// A table whose first header cell may be [`ROW_LABEL`], in which case the
/// first column holds row names.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub row_names: Option<Vec<String>>,
    pub col_names: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_table<R: Read>(r: R) -> Result<Table> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let labelled = header.first().is_some_and(|h| h == ROW_LABEL);
    let col_names: Vec<String> = if labelled { header[1..].to_vec() } else { header };
    if col_names.is_empty() {
        return Err(Error::InvalidInput("table has no columns".into()));
    }
    let mut row_names = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut cells = rec.iter();
        if labelled {
            row_names.push(cells.next().unwrap_or_default().to_owned());
        }
        let row: Vec<f64> = cells
            .enumerate()
            .map(|(c, cell)| parse_cell(cell, line, c))
            .collect::<Result<_>>()?;
        if row.len() != col_names.len() {
            return Err(Error::InvalidInput(format!(
                "line {line}: expected {} values, found {}",
                col_names.len(),
                row.len()
            )));
        }
        values.extend(row);
    }
    let n = values.len() / col_names.len();
    if n == 0 {
        return Err(Error::InvalidInput("table has no rows".into()));
    }
    Ok(Table {
        row_names: labelled.then_some(row_names),
        values: DMatrix::from_row_slice(n, col_names.len(), &values),
        col_names,
    })
}

pub fn read_table_file(path: &Path) -> Result<Table> {
    read_table(std::fs::File::open(path)?)
}

/// Raw observations, one row per respondent, header = variable names.
pub fn read_raw<R: Read>(r: R) -> Result<Dataset> {
    let t = read_table(r)?;
    if t.values.nrows() < 2 {
        return Err(Error::InvalidInput("need at least two observations".into()));
    }
    Ok(Dataset {
        variable_names: t.col_names,
        kind: DataKind::Raw(t.values),
    })
}

/// A J×J covariance matrix with header = variable names; the sample size
/// must be supplied separately.
pub fn read_covariance<R: Read>(r: R, n_obs: usize) -> Result<Dataset> {
    let t = read_table(r)?;
    if t.values.nrows() != t.values.ncols() {
        return Err(Error::InvalidInput(format!(
            "covariance input must be square, got {}x{}",
            t.values.nrows(),
            t.values.ncols()
        )));
    }
    Ok(Dataset {
        variable_names: t.col_names,
        kind: DataKind::Covariance(SampleCovariance::new(t.values, n_obs)?),
    })
}

/// Writes `# schema_version=…` followed by a labelled table.
pub fn write_table<W: Write>(w: W, row_names: &[String], col_names: &[String], m: &DMatrix<f64>) -> Result<()> {
    if row_names.len() != m.nrows() || col_names.len() != m.ncols() {
        return Err(Error::DimensionMismatch("table labels do not match the matrix".into()));
    }
    let mut w = w;
    writeln!(w, "# schema_version={SCHEMA_VERSION}")?;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec![ROW_LABEL.to_owned()];
    header.extend(col_names.iter().cloned());
    wtr.write_record(&header)?;
    for (r, name) in row_names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(m.row(r).iter().map(|v| format_number(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest representation that round-trips, with `inf`/`-inf`/`nan` for
/// non-finite values.
pub fn format_number(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

/// Default factor labels `F1..FK`.
pub fn factor_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("F{i}")).collect()
}
