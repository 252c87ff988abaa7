use std::collections::BTreeSet;
use std::path::Path;

use super::{Dataset, Normalization};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

struct RawTable {
    features: Vec<f64>,
    cols: usize,
    labels: Vec<String>,
}

fn read_table(path: &Path, label_column: &str) -> Result<RawTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let Some(label_at) = headers.iter().position(|h| h == label_column) else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            column: 0,
            detail: format!("no column named {label_column:?}"),
        });
    };
    let cols = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        for (c, cell) in record.iter().enumerate() {
            if c == label_at {
                labels.push(cell.trim().to_string());
                continue;
            }
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                column: c + 1,
                detail: format!("non-numeric value {cell:?} in column {:?}", &headers[c]),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    column: c + 1,
                    detail: format!("non-finite value {cell:?}"),
                });
            }
            features.push(value);
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 2,
            column: 0,
            detail: "no data rows".into(),
        });
    }
    Ok(RawTable {
        features,
        cols,
        labels,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let (line, detail) = match e.position() {
        Some(p) => (p.line() as usize, e.to_string()),
        None => (0, e.to_string()),
    };
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column: 0,
        detail,
    }
}

fn build(
    path: &Path,
    table: RawTable,
    normalization: Normalization,
    names: Vec<String>,
) -> Result<Dataset> {
    let rows = table.labels.len();
    let mut labels = Vec::with_capacity(rows);
    for (i, l) in table.labels.iter().enumerate() {
        match names.iter().position(|n| n == l) {
            Some(y) => labels.push(y),
            None => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    column: 0,
                    detail: format!("label {l:?} was not seen in the training file"),
                })
            }
        }
    }
    let mut x = Tensor::matrix(rows, table.cols, table.features)?;
    normalization.apply(&mut x)?;
    Dataset::new(x, labels, names.len())?
        .with_normalization(normalization)
        .with_label_names(names)
}

/// Read a CSV file with a header row. Every column except `label_column` is
/// a numeric feature, standardized with this file's own statistics. Labels
/// are mapped to ids in sorted order of their text.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let table = read_table(path, label_column)?;
    let names: Vec<String> = table
        .labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let raw = Tensor::matrix(table.labels.len(), table.cols, table.features.clone())?;
    let normalization = Normalization::fit(&raw)?;
    build(path, table, normalization, names)
}

/// Read a held-out CSV file using the normalization and label map of
/// `reference` (typically the training split).
pub fn load_csv_with(path: &Path, label_column: &str, reference: &Dataset) -> Result<Dataset> {
    let (Some(norm), Some(names)) = (reference.normalization(), reference.label_names()) else {
        return Err(Error::invalid(
            "reference dataset carries no normalization or label map",
        ));
    };
    let table = read_table(path, label_column)?;
    if table.cols != reference.input_dim() {
        return Err(Error::shape(
            "load_csv",
            format!(
                "{} features, reference has {}",
                table.cols,
                reference.input_dim()
            ),
        ));
    }
    build(path, table, norm.clone(), names.to_vec())
}
