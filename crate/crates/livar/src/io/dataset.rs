//! Dataset CSV: header `f0,…,f{dim-1},label`, one sample per row, floats
//! with 17 significant digits.

use std::path::Path;

use livar_core::data::Dataset;
use livar_core::Matrix;

use crate::{Error, Result};

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(super::create(path)?);
    let csv_err = |e: csv::Error| Error::format(path, e);
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for (i, y) in data.labels().iter().enumerate() {
        let mut rec: Vec<String> = data.features().row(i).iter().map(|v| format!("{v:.16e}")).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset; the class count is `max label + 1` unless given.
pub fn read_dataset_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let header = r.headers().map_err(|e| Error::format(path, e))?.clone();
    let dim = header
        .len()
        .checked_sub(1)
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::format(path, "need feature columns and a label column"))?;
    for (j, name) in header.iter().enumerate() {
        let expected = if j == dim { "label".to_string() } else { format!("f{j}") };
        if name != expected {
            return Err(Error::format(
                path,
                format!("column {j} is `{name}`, expected `{expected}`"),
            ));
        }
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        for j in 0..dim {
            values.push(
                rec[j]
                    .parse::<f64>()
                    .map_err(|e| Error::format(path, format!("row {line}, f{j}: {e}")))?,
            );
        }
        labels.push(
            rec[dim]
                .parse::<usize>()
                .map_err(|e| Error::format(path, format!("row {line}, label: {e}")))?,
        );
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Matrix::from_vec(labels.len(), dim, values)?;
    Ok(Dataset::new(features, labels, classes)?)
}
