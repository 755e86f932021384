//! Reconstruction matrix and the symmetric affinity graph built from it.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::neighborhood::row_distance;
use crate::sparse::SparseMatrix;

/// Distances below this are floored when forming similarity weights.
pub const DISTANCE_FLOOR: f64 = 1e-12;

/// Solver output for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSolution {
    pub neighbors: Vec<usize>,
    pub alpha: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionMatrix {
    /// Row `i` holds the coefficients of point `i` over its neighbors.
    pub r: SparseMatrix,
    pub converged: Vec<bool>,
}

impl ReconstructionMatrix {
    pub fn len(&self) -> usize {
        self.r.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.r.rows() == 0
    }

    pub fn unconverged_count(&self) -> usize {
        self.converged.iter().filter(|c| !**c).count()
    }
}

/// Scatters per-point coefficients into an `n x n` sparse matrix.
pub fn assemble_reconstruction_matrix(solutions: &[PointSolution], n: usize) -> Result<ReconstructionMatrix> {
    if solutions.len() != n {
        return Err(Error::dim(format!("{} solutions for {n} points", solutions.len())));
    }
    let mut rows = Vec::with_capacity(n);
    for (i, s) in solutions.iter().enumerate() {
        if s.neighbors.len() != s.alpha.len() {
            return Err(Error::dim(format!(
                "point {i}: {} neighbors but {} coefficients",
                s.neighbors.len(),
                s.alpha.len()
            )));
        }
        if s.neighbors.contains(&i) {
            return Err(Error::input(format!("point {i} lists itself as a neighbor")));
        }
        rows.push(s.neighbors.iter().copied().zip(s.alpha.iter().copied()).collect());
    }
    Ok(ReconstructionMatrix {
        r: SparseMatrix::from_rows(n, rows)?,
        converged: solutions.iter().map(|s| s.converged).collect(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimilarityDiagnostics {
    /// Rows with no positive weight.
    pub zero_rows: Vec<usize>,
    /// `(i, j)` pairs whose distance was floored.
    pub floored: Vec<(usize, usize)>,
}

/// `w_ij = (|r_ij| / |x_j - x_i|) / sum_t (|r_it| / |x_t - x_i|)`.
pub fn similarity_weights(r: &SparseMatrix, x: &DMatrix<f64>) -> Result<(SparseMatrix, SimilarityDiagnostics)> {
    if r.rows() != x.nrows() || r.cols() != x.nrows() {
        return Err(Error::dim(format!(
            "reconstruction matrix is {}x{} for {} points",
            r.rows(),
            r.cols(),
            x.nrows()
        )));
    }
    let mut diag = SimilarityDiagnostics::default();
    let mut rows = Vec::with_capacity(r.rows());
    for i in 0..r.rows() {
        let mut row: Vec<(usize, f64)> = r
            .row(i)
            .filter(|&(j, v)| j != i && v != 0.0)
            .map(|(j, v)| {
                let mut d = row_distance(x, i, j);
                if d < DISTANCE_FLOOR {
                    d = DISTANCE_FLOOR;
                    diag.floored.push((i, j));
                }
                (j, v.abs() / d)
            })
            .collect();
        let total: f64 = row.iter().map(|e| e.1).sum();
        if total > 0.0 && total.is_finite() {
            row.iter_mut().for_each(|e| e.1 /= total);
        } else {
            diag.zero_rows.push(i);
            row.clear();
        }
        rows.push(row);
    }
    Ok((SparseMatrix::from_rows(r.cols(), rows)?, diag))
}

/// Entrywise `max(W, W^T)`.
pub fn symmetrize(w: &SparseMatrix) -> Result<SparseMatrix> {
    if w.rows() != w.cols() {
        return Err(Error::dim("affinity matrix must be square"));
    }
    let t = w.transpose();
    let rows = (0..w.rows())
        .map(|i| {
            let mut merged: Vec<(usize, f64)> = Vec::new();
            let (mut a, mut b) = (w.row(i).peekable(), t.row(i).peekable());
            loop {
                match (a.peek().copied(), b.peek().copied()) {
                    (Some((ja, va)), Some((jb, vb))) if ja == jb => {
                        merged.push((ja, va.max(vb)));
                        a.next();
                        b.next();
                    }
                    (Some((ja, va)), Some((jb, _))) if ja < jb => {
                        merged.push((ja, va));
                        a.next();
                    }
                    (Some(_), Some((jb, vb))) => {
                        merged.push((jb, vb));
                        b.next();
                    }
                    (Some(e), None) | (None, Some(e)) => {
                        merged.push(e);
                        a.next();
                        b.next();
                    }
                    (None, None) => break,
                }
            }
            merged
        })
        .collect();
    SparseMatrix::from_rows(w.cols(), rows)
}
