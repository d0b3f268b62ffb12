use std::path::Path;

use ndarray::Array2;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::config::CsvSchema;

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub data: Dataset,
    /// Rows skipped because a mapped cell was blank.
    pub dropped: usize,
}

/// Reads the named columns of a headered CSV into an `n × columns.len()`
/// matrix. Rows with a blank cell in any requested column are dropped and
/// counted.
pub fn read_columns(path: &Path, columns: &[String]) -> Result<(Array2<f64>, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    let index: Vec<usize> = columns
        .iter()
        .map(|name| {
            header.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Csv {
                path: path.to_path_buf(),
                row: 1,
                detail: format!("missing column {name:?}"),
            })
        })
        .collect::<Result<_>>()?;

    let mut values = Vec::new();
    let mut rows = 0;
    let mut dropped = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            csv_error(path, line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let cells: Vec<&str> = index.iter().map(|&i| record.get(i).unwrap_or("").trim()).collect();
        if cells.iter().any(|c| c.is_empty()) {
            dropped += 1;
            continue;
        }
        for (cell, name) in cells.iter().zip(columns) {
            let v: f64 = cell.parse().map_err(|_| Error::Csv {
                path: path.to_path_buf(),
                row: line,
                detail: format!("non-numeric value {cell:?} in column {name:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    row: line,
                    detail: format!("non-finite value {cell:?} in column {name:?}"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    let matrix = Array2::from_shape_vec((rows, columns.len()), values).expect("row-major fill");
    Ok((matrix, dropped))
}

fn csv_error(path: &Path, row: usize, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        detail: e.to_string(),
    }
}

/// Loads a dataset per `schema`. For regression targets `y` is replaced by
/// `(y − mean) / (max − min)` (centering only if `y` is constant).
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Ingested> {
    let mut columns = schema.x_cols.clone();
    columns.extend(schema.s_cols.iter().cloned());
    columns.push(schema.y_col.clone());
    if schema.x_cols.is_empty() || schema.s_cols.is_empty() {
        return Err(Error::Config("csv schema needs at least one x and one s column".into()));
    }
    let (all, dropped) = read_columns(path, &columns)?;
    let p = schema.x_cols.len();
    let q = schema.s_cols.len();
    let x = all.slice(ndarray::s![.., ..p]).to_owned();
    let s = all.slice(ndarray::s![.., p..p + q]).to_owned();
    let mut y = all.slice(ndarray::s![.., p + q..]).to_owned();
    if schema.regression && !y.is_empty() {
        let mean = y.sum() / y.len() as f64;
        let (lo, hi) = y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = if hi > lo { hi - lo } else { 1.0 };
        y.mapv_inplace(|v| (v - mean) / range);
    }
    Ok(Ingested {
        data: Dataset::new(x, s, y),
        dropped,
    })
}
