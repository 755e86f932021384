//! Spectral datasets and their on-disk format.
//!
//! A dataset is stored as two files: a CSV with one spectrum per row and a
//! header of band indices, and a JSON sidecar holding labels, abundances,
//! pure-endmember rows, the simulation config and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hapke::MixtureConfig;

/// Row of the dataset holding the pure spectrum of one endmember.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndmemberRow {
    pub endmember: usize,
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDataset {
    /// n x D reflectance matrix, one spectrum per row.
    pub x: DMatrix<f64>,
    /// Mixture id per row.
    pub labels: Option<Vec<usize>>,
    /// n x N_e abundances over the full endmember set.
    pub abundances: Option<DMatrix<f64>>,
    pub endmember_rows: Vec<EndmemberRow>,
    /// Endmember indices of each mixture.
    pub mixtures: Vec<Vec<usize>>,
    pub config: Option<MixtureConfig>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    labels: Option<Vec<usize>>,
    abundances: Option<Vec<Vec<f64>>>,
    endmember_rows: Vec<EndmemberRow>,
    #[serde(default)]
    mixtures: Vec<Vec<usize>>,
    config: Option<MixtureConfig>,
    seed: Option<u64>,
}

impl SpectralDataset {
    /// Unlabelled dataset from raw spectra.
    pub fn from_spectra(x: DMatrix<f64>) -> Self {
        SpectralDataset {
            x,
            labels: None,
            abundances: None,
            endmember_rows: Vec::new(),
            mixtures: Vec::new(),
            config: None,
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn bands(&self) -> usize {
        self.x.ncols()
    }

    /// Checks the structural invariants: label/abundance lengths and that
    /// abundance rows lie on the simplex.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::dim(format!("{} labels for {n} rows", l.len())));
            }
        }
        if let Some(a) = &self.abundances {
            if a.nrows() != n {
                return Err(Error::dim(format!("{} abundance rows for {n} rows", a.nrows())));
            }
            for (i, row) in a.row_iter().enumerate() {
                if row.iter().any(|v| *v < 0.0) || (row.sum() - 1.0).abs() > 1e-12 {
                    return Err(Error::input(format!("abundance row {i} is not on the simplex")));
                }
            }
        }
        for r in &self.endmember_rows {
            if r.row >= n {
                return Err(Error::input(format!("endmember row {} out of range", r.row)));
            }
        }
        Ok(())
    }

    /// Rows whose abundance is supported on the endmembers of `mixture`,
    /// including pure and boundary rows emitted under another mixture.
    pub fn manifold_members(&self, mixture: usize) -> Option<Vec<usize>> {
        let ab = self.abundances.as_ref()?;
        let idx = self.mixtures.get(mixture)?;
        Some(
            (0..self.len())
                .filter(|&i| {
                    (0..ab.ncols()).all(|e| ab[(i, e)] == 0.0 || idx.contains(&e))
                })
                .collect(),
        )
    }

    pub fn endmember_row(&self, endmember: usize) -> Option<usize> {
        self.endmember_rows
            .iter()
            .find(|r| r.endmember == endmember)
            .map(|r| r.row)
    }

    /// Applies `f` to every spectrum, keeping metadata.
    pub fn map_spectra(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        SpectralDataset {
            x: f(&self.x),
            ..self.clone()
        }
    }

    /// Sidecar path paired with a CSV path (`data.csv` -> `data.json`).
    pub fn sidecar_path(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)
            .map_err(|e| Error::io(csv_path, e.into()))?;
        let header: Vec<String> = (0..self.bands()).map(|b| b.to_string()).collect();
        w.write_record(&header).map_err(|e| Error::io(csv_path, e.into()))?;
        for row in self.x.row_iter() {
            let rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            w.write_record(&rec).map_err(|e| Error::io(csv_path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;

        let sidecar = Sidecar {
            labels: self.labels.clone(),
            abundances: self
                .abundances
                .as_ref()
                .map(|a| a.row_iter().map(|r| r.iter().copied().collect()).collect()),
            endmember_rows: self.endmember_rows.clone(),
            mixtures: self.mixtures.clone(),
            config: self.config.clone(),
            seed: self.seed,
        };
        let json_path = Self::sidecar_path(csv_path);
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::parse(&json_path, e.to_string()))?;
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))
    }

    /// Reads a CSV and, when present, its JSON sidecar.
    pub fn read(csv_path: &Path) -> Result<Self> {
        let x = read_matrix_csv(csv_path)?;
        let json_path = Self::sidecar_path(csv_path);
        let mut ds = SpectralDataset::from_spectra(x);
        if json_path.exists() {
            let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
            let side: Sidecar = serde_json::from_str(&text)
                .map_err(|e| Error::parse(&json_path, e.to_string()))?;
            ds.labels = side.labels;
            ds.abundances = match side.abundances {
                Some(rows) => Some(rows_to_matrix(&rows, &json_path)?),
                None => None,
            };
            ds.endmember_rows = side.endmember_rows;
            ds.mixtures = side.mixtures;
            ds.config = side.config;
            ds.seed = side.seed;
        }
        ds.validate()?;
        Ok(ds)
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], path: &Path) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::parse(path, "ragged abundance rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Reads a headered numeric CSV into a matrix (one record per row).
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(path, format!("record {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    rows_to_matrix(&rows, path)
}
