//! k-nearest-neighbor neighborhoods and their normalized form.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Centered columns with a norm below this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// One target point together with its raw and normalized neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodProblem {
    pub target_index: usize,
    pub x: DVector<f64>,
    pub neighbor_indices: Vec<usize>,
    /// D x k raw neighbors.
    pub n: DMatrix<f64>,
    /// D x k centered, unit-norm neighbors.
    pub n_hat: DMatrix<f64>,
    /// Columns of `n_hat` replaced by zero because the neighbor sits on the
    /// neighborhood mean.
    pub degenerate: Vec<bool>,
}

impl NeighborhoodProblem {
    /// Builds a problem from an explicit target and neighbor matrix.
    pub fn new(target_index: usize, x: DVector<f64>, neighbor_indices: Vec<usize>, n: DMatrix<f64>) -> Result<Self> {
        if n.nrows() != x.len() || n.ncols() != neighbor_indices.len() {
            return Err(Error::dim(format!(
                "target has {} bands, neighbors are {}x{} with {} indices",
                x.len(),
                n.nrows(),
                n.ncols(),
                neighbor_indices.len()
            )));
        }
        let (n_hat, degenerate) = normalize_neighborhood(&n);
        Ok(NeighborhoodProblem {
            target_index,
            x,
            neighbor_indices,
            n,
            n_hat,
            degenerate,
        })
    }

    pub fn k(&self) -> usize {
        self.n.ncols()
    }
}

fn sq_dist(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    x.row(i)
        .iter()
        .zip(x.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Exhaustive Euclidean k-NN over the rows of `x` (n x D).
///
/// The point itself is excluded; ties are broken by the smaller index.
pub fn knn(x: &DMatrix<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = x.nrows();
    if k == 0 || k >= n {
        return Err(Error::input(format!("k must satisfy 1 <= k < n, got k={k}, n={n}")));
    }
    // row-major copy so each distance walks contiguous memory
    let xt = x.transpose();
    let bands = x.ncols();
    let data = xt.as_slice();
    let row = |i: usize| &data[i * bands..(i + 1) * bands];

    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let xi = row(i);
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dist = xi.iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    (dist, j)
                })
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            d.select_nth_unstable_by(k - 1, cmp);
            d.truncate(k);
            d.sort_by(cmp);
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Euclidean distance between rows `i` and `j` of `x`.
pub fn row_distance(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    sq_dist(x, i, j).sqrt()
}

/// Centers the columns of `n` on their mean and scales them to unit norm.
///
/// Returns the normalized matrix and a flag per column; a flagged column had
/// a centered norm below [`DEGENERATE_NORM`] and is left at zero.
pub fn normalize_neighborhood(n: &DMatrix<f64>) -> (DMatrix<f64>, Vec<bool>) {
    let k = n.ncols();
    let mean = n.column_mean();
    let mut out = n.clone();
    let mut degenerate = vec![false; k];
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col -= &mean;
        let norm = col.norm();
        if norm < DEGENERATE_NORM {
            col.fill(0.0);
            degenerate[j] = true;
        } else {
            col /= norm;
        }
    }
    (out, degenerate)
}

/// Builds one [`NeighborhoodProblem`] per row of `x`.
pub fn build_problems(x: &DMatrix<f64>, k: usize) -> Result<Vec<NeighborhoodProblem>> {
    let neighbors = knn(x, k)?;
    problems_from_neighbors(x, neighbors)
}

pub fn problems_from_neighbors(x: &DMatrix<f64>, neighbors: Vec<Vec<usize>>) -> Result<Vec<NeighborhoodProblem>> {
    neighbors
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let target = x.row(i).transpose();
            let n = DMatrix::from_columns(
                &idx.iter().map(|&j| x.row(j).transpose()).collect::<Vec<_>>(),
            );
            NeighborhoodProblem::new(i, target, idx, n)
        })
        .collect()
}
