//! Row-major CSV output with 17 significant digits, enough to round-trip an `f64`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::error::{Error, Result};

/// `{:.16e}` formatting; non-finite values print as `inf`, `-inf` or `NaN`.
pub fn format_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn rows_to_csv<'a>(rows: impl Iterator<Item = Vec<f64>> + 'a) -> String {
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.into_iter().map(format_value).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn map_to_csv(map: &Array2<f64>) -> String {
    rows_to_csv(map.rows().into_iter().map(|r| r.to_vec()))
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    rows_to_csv((0..m.nrows()).map(|i| m.row(i).iter().copied().collect()))
}

pub fn write_map_csv(path: impl AsRef<Path>, map: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map_to_csv(map)).map_err(|e| Error::io(path, e))
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, matrix_to_csv(m)).map_err(|e| Error::io(path, e))
}

/// Parses CSV written by this module back into a map.
pub fn read_map_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Format(format!("{}: ragged rows", path.display())));
    }
    Array2::from_shape_vec((rows.len(), w), rows.concat()).map_err(|e| Error::Format(e.to_string()))
}
