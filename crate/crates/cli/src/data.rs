//! CSV loading. Files need a header row and '.' as the decimal separator.

use std::collections::HashMap;
use std::path::Path;

use gmmdc::PanelDataset;
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, CliResult};

/// A fully numeric view of the columns a model asked for.
pub struct Table {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
        let headers = reader.headers()?.iter().map(str::to_owned).collect();
        let rows = reader.records().collect::<Result<Vec<_>, _>>()?;
        if rows.is_empty() {
            return Err(CliError::data(format!(
                "{} has no data rows",
                path.display()
            )));
        }
        Ok(Self { headers, rows })
    }

    #[cfg(test)]
    pub fn from_str(text: &str) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.iter().map(str::to_owned).collect();
        let rows = reader.records().collect::<Result<Vec<_>, _>>()?;
        Ok(Self { headers, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    fn index(&self, name: &str) -> CliResult<usize> {
        let lookup: HashMap<&str, usize> = self
            .headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.as_str(), i))
            .collect();
        lookup.get(name).copied().ok_or_else(|| {
            CliError::data(format!(
                "column '{name}' not found (available: {})",
                self.headers.join(", ")
            ))
        })
    }

    fn cell(&self, row: usize, col: usize) -> &str {
        self.rows[row].get(col).unwrap_or("")
    }

    pub fn numeric(&self, name: &str) -> CliResult<Vec<f64>> {
        let col = self.index(name)?;
        (0..self.len())
            .map(|r| {
                let raw = self.cell(r, col);
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(CliError::data(format!(
                        "non-numeric value '{raw}' in column '{name}', data row {}",
                        r + 1
                    ))),
                }
            })
            .collect()
    }

    fn integer(&self, name: &str) -> CliResult<Vec<i64>> {
        let col = self.index(name)?;
        (0..self.len())
            .map(|r| {
                let raw = self.cell(r, col);
                raw.parse::<i64>().map_err(|_| {
                    CliError::data(format!(
                        "column '{name}' must hold integers; found '{raw}' in data row {}",
                        r + 1
                    ))
                })
            })
            .collect()
    }

    /// An `n × len(names)` matrix of the named columns.
    pub fn matrix(&self, names: &[String]) -> CliResult<DMatrix<f64>> {
        let cols = names
            .iter()
            .map(|n| self.numeric(n))
            .collect::<CliResult<Vec<_>>>()?;
        Ok(DMatrix::from_fn(self.len(), names.len(), |i, j| cols[j][i]))
    }

    pub fn vector(&self, name: &str) -> CliResult<DVector<f64>> {
        Ok(DVector::from_vec(self.numeric(name)?))
    }

    /// A balanced panel from long-format columns. `x` is optional; when it
    /// is absent the regressor slot is filled with zeros and dropped.
    pub fn panel(&self, id: &str, time: &str, y: &str, x: Option<&str>) -> CliResult<PanelDataset> {
        let ids = self.integer(id)?;
        let times = self.integer(time)?;
        let ys = self.numeric(y)?;
        let xs = match x {
            Some(name) => self.numeric(name)?,
            None => vec![0.0; self.len()],
        };
        let records: Vec<(i64, i64, f64, f64)> = (0..self.len())
            .map(|r| (ids[r], times[r], ys[r], xs[r]))
            .collect();
        let mut panel = PanelDataset::from_long(&records)?;
        if x.is_none() {
            panel.x = None;
        }
        Ok(panel)
    }
}
