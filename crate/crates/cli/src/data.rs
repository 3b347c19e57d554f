//! CSV ingestion and emission. Datasets are rectangular float matrices;
//! a header row is detected by the first row failing to parse as floats.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use platedvi::Tensor;

/// An N x D float matrix loaded from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dataset {
    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.rows, self.cols], self.data.clone())
            .expect("dataset dimensions are consistent")
    }
}

/// Load a CSV file of floats. Errors carry 1-based row/column positions
/// counted over the file including any header row.
pub fn load_csv(path: &Path) -> Result<Dataset, String> {
    let file = File::open(path).map_err(|e| format!("cannot open {}: {e}", path.display()))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut cols = 0usize;
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| format!("{}: row {line}: {e}", path.display()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let parsed: Vec<Result<f64, usize>> = record
            .iter()
            .enumerate()
            .map(|(c, field)| field.parse::<f64>().map_err(|_| c + 1))
            .collect();
        if rows == 0 && parsed.iter().any(|p| p.is_err()) && line == 1 {
            // First row with non-numeric cells is a header.
            continue;
        }
        if rows == 0 {
            cols = record.len();
        } else if record.len() != cols {
            return Err(format!(
                "{}: row {line} has {} columns, expected {cols}",
                path.display(),
                record.len()
            ));
        }
        for (c, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(v) if v.is_finite() => data.push(v),
                Ok(v) => {
                    return Err(format!(
                        "{}: row {line} col {}: non-finite value {v}",
                        path.display(),
                        c + 1
                    ))
                }
                Err(col) => {
                    return Err(format!(
                        "{}: row {line} col {col}: `{}` is not a number",
                        path.display(),
                        &record[col - 1]
                    ))
                }
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(format!("{}: dataset is empty", path.display()));
    }
    Ok(Dataset { rows, cols, data })
}

/// One CSV line for a row of floats, using shortest round-trip formatting.
pub fn format_row(row: &[f64]) -> String {
    row.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Write a headerless float CSV.
pub fn save_csv(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<(), String> {
    assert_eq!(data.len(), rows * cols, "matrix dimensions are consistent");
    let file =
        File::create(path).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    let mut out = BufWriter::new(file);
    for r in 0..rows {
        writeln!(out, "{}", format_row(&data[r * cols..(r + 1) * cols]))
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    out.flush()
        .map_err(|e| format!("cannot write {}: {e}", path.display()))
}
