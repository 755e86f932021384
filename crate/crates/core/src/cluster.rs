//! Normalized spectral clustering of a symmetric affinity graph.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::smallest_eigenpairs;
use crate::sparse::SparseMatrix;

pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, Serialize)]
pub struct ClusterResult {
    /// Labels in `0..p`; isolated vertices get label `p`.
    pub labels: Vec<usize>,
    pub isolated: Vec<usize>,
    /// Smallest eigenvalues of the normalized Laplacian on the connected vertices.
    pub eigenvalues: Vec<f64>,
    pub inertia: f64,
}

/// `I - D^{-1/2} W D^{-1/2}` over vertices with positive degree. Returns the
/// dense Laplacian and the kept vertex indices.
pub fn normalized_laplacian(w: &SparseMatrix) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if w.rows() != w.cols() {
        return Err(Error::dim("affinity matrix must be square"));
    }
    let n = w.rows();
    let mut degree = vec![0.0; n];
    for (i, d) in degree.iter_mut().enumerate() {
        for (j, v) in w.row(i) {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::input(format!("affinity ({i}, {j}) = {v} is not a finite non-negative weight")));
            }
            *d += v;
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| degree[i] > 0.0).collect();
    let mut position = vec![usize::MAX; n];
    for (p, &i) in kept.iter().enumerate() {
        position[i] = p;
    }
    let m = kept.len();
    let mut l = DMatrix::identity(m, m);
    for (p, &i) in kept.iter().enumerate() {
        for (j, v) in w.row(i) {
            if position[j] != usize::MAX {
                l[(p, position[j])] -= v / (degree[i] * degree[j]).sqrt();
            }
        }
    }
    Ok((l, kept))
}

/// Squared Euclidean distance between row `i` of `a` and row `j` of `b`.
fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum()
}

fn kmeans_pp_init(points: &DMatrix<f64>, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = points.nrows();
    let mut centers = DMatrix::zeros(p, points.ncols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&points.row(first));
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centers, 0)).collect();
    for c in 1..p {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, b) in best.iter().enumerate() {
                if target < *b {
                    idx = i;
                    break;
                }
                target -= b;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(points, i, &centers, c));
        }
    }
    centers
}

fn lloyd(points: &DMatrix<f64>, mut centers: DMatrix<f64>) -> (Vec<usize>, f64) {
    let (n, p) = (points.nrows(), centers.nrows());
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..p {
                let d = sq_dist(points, i, &centers, c);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if *label != best.1 {
                *label = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::zeros(p, points.ncols());
        let mut counts = vec![0usize; p];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += points.row(i);
        }
        for c in 0..p {
            if counts[c] > 0 {
                centers.row_mut(c).copy_from(&(sums.row(c) / counts[c] as f64));
            } else {
                // reseed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points, a, &centers, labels[a]).total_cmp(&sq_dist(points, b, &centers, labels[b]))
                    })
                    .expect("non-empty point set");
                centers.row_mut(c).copy_from(&points.row(far));
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points, i, &centers, labels[i])).sum();
    (labels, inertia)
}

/// Relabels clusters in order of first appearance.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// k-means++ with `restarts` seeded restarts; keeps the lowest inertia.
pub fn kmeans(points: &DMatrix<f64>, p: usize, restarts: usize, seed: u64) -> Result<(Vec<usize>, f64)> {
    if p == 0 || p > points.nrows() {
        return Err(Error::input(format!("cannot form {p} clusters from {} points", points.nrows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let centers = kmeans_pp_init(points, p, &mut rng);
        let (labels, inertia) = lloyd(points, centers);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((labels, inertia));
        }
    }
    let (labels, inertia) = best.expect("at least one restart");
    Ok((canonical(&labels), inertia))
}

/// Partitions the graph into `p` clusters.
pub fn spectral_cluster(w_sym: &SparseMatrix, p: usize, seed: u64) -> Result<ClusterResult> {
    if p == 0 {
        return Err(Error::input("cluster count must be at least 1"));
    }
    let n = w_sym.rows();
    let (l, kept) = normalized_laplacian(w_sym)?;
    let isolated: Vec<usize> = (0..n).filter(|i| kept.binary_search(i).is_err()).collect();
    if kept.len() < p {
        return Err(Error::input(format!(
            "only {} connected vertices for {p} clusters",
            kept.len()
        )));
    }
    let mut labels = vec![p; n];
    if p == 1 {
        kept.iter().for_each(|&i| labels[i] = 0);
        return Ok(ClusterResult {
            labels,
            isolated,
            eigenvalues: vec![0.0],
            inertia: 0.0,
        });
    }
    let eig = smallest_eigenpairs(&l, p)?;
    let mut u = eig.vectors;
    for mut row in u.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let (sub, inertia) = kmeans(&u, p, KMEANS_RESTARTS, seed)?;
    for (pos, &i) in kept.iter().enumerate() {
        labels[i] = sub[pos];
    }
    Ok(ClusterResult {
        labels,
        isolated,
        eigenvalues: eig.values.iter().copied().collect::<Vec<_>>(),
        inertia,
    })
}

/// Eigenvalues of a dense symmetric matrix, ascending.
pub fn spectrum(a: &DMatrix<f64>) -> DVector<f64> {
    let mut v: Vec<f64> = ((a + a.transpose()) * 0.5).symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    DVector::from_vec(v)
}
