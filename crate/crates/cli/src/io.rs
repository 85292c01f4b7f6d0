//! CSV input and output.

use std::fs;
use std::path::Path;

use hdiv_core::{validate_dataset, IVDataset};
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, Result};

/// Scientific notation with 17 significant digits; parses back to the same value.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads a numeric CSV into a matrix. Rows and columns in messages are
/// 1-based and count data rows only.
pub fn read_matrix_csv(path: &Path, header: bool) -> Result<DMatrix<f64>> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{name}: {e}")))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Input(format!("{name}: row {}: {e}", r + 1)))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(CliError::Input(format!(
                    "{name}: row {} has {} columns, expected {c}",
                    r + 1,
                    record.len()
                )))
            }
            _ => {}
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                CliError::Input(format!(
                    "{name}: row {}, column {}: cannot parse {cell:?} as a number",
                    r + 1,
                    c + 1
                ))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| CliError::Input(format!("{name}: no data rows")))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Loads and validates `(Y, X, Z)`; `Y` must have a single column.
pub fn load_dataset_csv(y: &Path, x: &Path, z: &Path, header: bool) -> Result<IVDataset> {
    let ym = read_matrix_csv(y, header)?;
    if ym.ncols() != 1 {
        return Err(CliError::Input(format!(
            "{}: expected one column, found {}",
            y.display(),
            ym.ncols()
        )));
    }
    let xm = read_matrix_csv(x, header)?;
    let zm = read_matrix_csv(z, header)?;
    let yv = DVector::from_column_slice(ym.as_slice());
    if xm.nrows() != yv.len() || zm.nrows() != yv.len() {
        return Err(CliError::Input(format!(
            "row counts differ: Y has {}, X has {}, Z has {}",
            yv.len(),
            xm.nrows(),
            zm.nrows()
        )));
    }
    Ok(validate_dataset(IVDataset::new(yv, xm, zm)?)?)
}

/// Header row plus data rows, comma-separated with LF line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let to_err = |e: csv::Error| CliError::Input(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(row).map_err(to_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes a matrix with generated column names `c1..cK`.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let names: Vec<String> = (1..=m.ncols()).map(|j| format!("c{j}")).collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = m
        .row_iter()
        .map(|r| r.iter().map(|v| fmt_float(*v)).collect())
        .collect();
    write_csv(path, &header, &rows)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
