//! Covariate matrix plus binary treatment vector, and CSV ingestion.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset has no rows")]
    Empty,
    #[error("dataset has no covariates")]
    NoCovariates,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("treatment group {0} is empty")]
    EmptyGroup(u8),
    #[error("covariate value at row {row}, column {column} is not finite")]
    NonFinite { row: usize, column: usize },
    #[error("treatment column {0:?} not found in header")]
    MissingColumn(String),
    #[error("row {row}: treatment column {column:?} must be 0 or 1, got {value:?}")]
    NonBinaryTreatment { row: usize, column: String, value: String },
    #[error("row {row}, column {column:?}: cannot parse {value:?} as a number")]
    Unparseable { row: usize, column: String, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    p: usize,
    /// Row-major `n x p`.
    x: Vec<f64>,
    t: Vec<u8>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(n: usize, p: usize, x: Vec<f64>, t: Vec<u8>) -> Result<Self> {
        let names = (1..=p).map(|k| format!("x{k}")).collect();
        Self::with_names(n, p, x, t, names)
    }

    pub fn with_names(n: usize, p: usize, x: Vec<f64>, t: Vec<u8>, names: Vec<String>) -> Result<Self> {
        if n == 0 {
            return Err(DatasetError::Empty);
        }
        if p == 0 {
            return Err(DatasetError::NoCovariates);
        }
        if x.len() != n * p || t.len() != n || names.len() != p {
            return Err(DatasetError::Shape(format!(
                "n={n}, p={p}: x has {} entries, t has {}, {} names",
                x.len(),
                t.len(),
                names.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite {
                row: i / p,
                column: i % p,
            });
        }
        if let Some(bad) = t.iter().find(|v| **v > 1) {
            return Err(DatasetError::Shape(format!("treatment value {bad} is not binary")));
        }
        Ok(Self { n, p, x, t, names })
    }

    /// Checks that both treatment groups are present.
    pub fn require_both_groups(&self) -> Result<()> {
        let treated = self.treated_count();
        if treated == 0 {
            return Err(DatasetError::EmptyGroup(1));
        }
        if treated == self.n {
            return Err(DatasetError::EmptyGroup(0));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.x.chunks(self.p)
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn treatment(&self) -> &[u8] {
        &self.t
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn treated_count(&self) -> usize {
        self.t.iter().filter(|v| **v == 1).count()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.treated_count() as f64 / self.n as f64
    }

    /// True when there are fewer rows than covariates.
    pub fn is_wide(&self) -> bool {
        self.n < self.p
    }

    /// Reads a CSV with a header row. The column named `treatment` holds
    /// 0/1 labels; every other column is a numeric covariate.
    pub fn from_csv_reader<R: Read>(reader: R, treatment: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let t_col = header
            .iter()
            .position(|h| h == treatment)
            .ok_or_else(|| DatasetError::MissingColumn(treatment.to_string()))?;
        let names: Vec<String> = header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != t_col)
            .map(|(_, h)| h.clone())
            .collect();
        let mut x = Vec::new();
        let mut t = Vec::new();
        for (index, record) in rdr.records().enumerate() {
            let record = record?;
            // Header is line 1.
            let row = index + 2;
            if record.len() != header.len() {
                return Err(DatasetError::RaggedRow {
                    row,
                    expected: header.len(),
                    found: record.len(),
                });
            }
            for (col, field) in record.iter().enumerate() {
                let field = field.trim();
                if col == t_col {
                    let label = match field {
                        "0" | "0.0" => 0,
                        "1" | "1.0" => 1,
                        _ => {
                            return Err(DatasetError::NonBinaryTreatment {
                                row,
                                column: treatment.to_string(),
                                value: field.to_string(),
                            })
                        }
                    };
                    t.push(label);
                } else {
                    let value: f64 = field.parse().map_err(|_| DatasetError::Unparseable {
                        row,
                        column: header[col].clone(),
                        value: field.to_string(),
                    })?;
                    if !value.is_finite() {
                        return Err(DatasetError::Unparseable {
                            row,
                            column: header[col].clone(),
                            value: field.to_string(),
                        });
                    }
                    x.push(value);
                }
            }
        }
        let n = t.len();
        let p = names.len();
        Self::with_names(n, p, x, t, names)
    }

    pub fn from_csv_path(path: &Path, treatment: &str) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file), treatment)
    }

    /// Writes the dataset as CSV with the treatment column first.
    pub fn write_csv<W: std::io::Write>(&self, writer: W, treatment: &str) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec![treatment.to_string()];
        header.extend(self.names.iter().cloned());
        wtr.write_record(&header)?;
        for (row, label) in self.rows().zip(&self.t) {
            let mut fields = vec![label.to_string()];
            fields.extend(row.iter().map(|v| format!("{v}")));
            wtr.write_record(&fields)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
