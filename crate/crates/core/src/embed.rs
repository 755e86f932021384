//! Low-dimensional embedding from a reconstruction matrix, plus the
//! regularized LLE reconstruction used as a baseline.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::affinity::{assemble_reconstruction_matrix, PointSolution, ReconstructionMatrix};
use crate::error::{Error, Result};
use crate::linalg::smallest_eigenpairs;
use crate::neighborhood::knn;
use crate::sparse::SparseMatrix;

pub const DEFAULT_LLE_REG: f64 = 1e-3;
const GAP_REL_TOL: f64 = 1e-6;
const GAP_ABS_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct EmbeddingResult {
    /// d x n coordinates, one column per point.
    pub y: DMatrix<f64>,
    pub d: usize,
    /// Rayleigh quotient of the constant vector followed by the `d` retained eigenvalues.
    pub eigvals: Vec<f64>,
    /// Smallest discarded eigenvalue, used for the gap report.
    pub next_eigval: Option<f64>,
    pub warning: Option<String>,
    pub per_cluster: BTreeMap<usize, ClusterEmbedding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEmbedding {
    pub members: Vec<usize>,
    pub y: DMatrix<f64>,
}

/// Dense `(I - R)^T (I - R)`.
pub fn embedding_operator(r: &SparseMatrix) -> Result<DMatrix<f64>> {
    if r.rows() != r.cols() {
        return Err(Error::dim(format!("reconstruction matrix is {}x{}", r.rows(), r.cols())));
    }
    let n = r.rows();
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        let row: Vec<(usize, f64)> = r.row(i).collect();
        for &(j, v) in &row {
            m[(i, j)] -= v;
            m[(j, i)] -= v;
        }
        for &(l, vl) in &row {
            let mut col = m.column_mut(l);
            for &(j, vj) in &row {
                col[j] += vj * vl;
            }
        }
    }
    Ok(m)
}

/// Minimizes `|Y - Y R|_F^2` over `Y` with `Y Y^T = I` and rows orthogonal to
/// the constant vector.
pub fn embed(r: &SparseMatrix, d: usize) -> Result<EmbeddingResult> {
    let n = r.rows();
    if d == 0 || d >= n {
        return Err(Error::input(format!("embedding dimension must satisfy 1 <= d < n, got d={d}, n={n}")));
    }
    let m = embedding_operator(r)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("reconstruction matrix has non-finite entries"));
    }
    let nf = n as f64;
    let col_means = DVector::from_fn(n, |j, _| m.column(j).sum() / nf);
    let grand = col_means.sum() / nf;

    // project out the constant vector, then park it above the spectrum
    let bound = m.row_iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let park = 2.0 * bound + 1.0;
    let deflated = DMatrix::from_fn(n, n, |i, j| {
        m[(i, j)] - col_means[i] - col_means[j] + grand + park / nf
    });

    let want = (d + 1).min(n - 1);
    let eig = smallest_eigenpairs(&deflated, want)?;
    let y = eig.vectors.columns(0, d).transpose();
    let mut eigvals = vec![grand];
    eigvals.extend(eig.values.iter().take(d));
    let next_eigval = (want > d).then(|| eig.values[d]);

    let warning = next_eigval.and_then(|next| {
        let last = eig.values[d - 1];
        let gap = next - last;
        (gap <= GAP_ABS_TOL + GAP_REL_TOL * next.abs().max(last.abs())).then(|| {
            format!("eigenvalue {last:.3e} at the cutoff is repeated (next {next:.3e}, gap {gap:.3e}); embedding basis is not unique")
        })
    });

    Ok(EmbeddingResult {
        y,
        d,
        eigvals,
        next_eigval,
        warning,
        per_cluster: BTreeMap::new(),
    })
}

impl EmbeddingResult {
    pub fn with_clusters(mut self, labels: &[usize]) -> Result<Self> {
        self.per_cluster = split_embeddings(&self.y, labels)?;
        Ok(self)
    }

    /// CSV with columns `point,label,y1..yd`.
    pub fn write_csv(&self, path: &Path, labels: Option<&[usize]>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let mut header = vec!["point".to_string(), "label".to_string()];
        header.extend((1..=self.d).map(|c| format!("y{c}")));
        w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
        for i in 0..self.y.ncols() {
            let mut rec = vec![i.to_string(), labels.map_or(String::new(), |l| l[i].to_string())];
            rec.extend(self.y.column(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Column subsets of `y` per label, members in ascending point order.
pub fn split_embeddings(y: &DMatrix<f64>, labels: &[usize]) -> Result<BTreeMap<usize, ClusterEmbedding>> {
    if labels.len() != y.ncols() {
        return Err(Error::dim(format!("{} labels for {} embedded points", labels.len(), y.ncols())));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(l, members)| {
            let y = y.select_columns(members.iter());
            (l, ClusterEmbedding { members, y })
        })
        .collect())
}

/// Affine reconstruction weights of `x` from the columns of `n`, with
/// `reg * trace(G) / k` added to the local Gram diagonal.
pub fn lle_weights(x: &DVector<f64>, n: &DMatrix<f64>, reg: f64) -> Result<DVector<f64>> {
    let k = n.ncols();
    if k == 0 || n.nrows() != x.len() {
        return Err(Error::dim(format!("neighborhood is {}x{k} for a {}-band point", n.nrows(), x.len())));
    }
    if !(reg >= 0.0 && reg.is_finite()) {
        return Err(Error::input(format!("reg: must be finite and >= 0, got {reg}")));
    }
    let mut z = n.clone();
    for mut col in z.column_iter_mut() {
        col -= x;
    }
    let mut g = z.tr_mul(&z);
    let trace = g.trace();
    let ridge = if trace > 0.0 { reg * trace / k as f64 } else { reg };
    for i in 0..k {
        g[(i, i)] += ridge;
    }
    // bordered system [G 1; 1^T 0] [w; mu] = [0; 1]
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    kkt.view_mut((0, 0), (k, k)).copy_from(&g);
    for i in 0..k {
        kkt[(i, k)] = 1.0;
        kkt[(k, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs[k] = 1.0;
    let scale = kkt.amax().max(1.0);
    let lu = kkt.lu();
    let sol = lu
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::numerical("local Gram matrix is singular; use reg > 0"))?;
    let w = sol.rows(0, k).into_owned();
    let resid = (&g * &w).add_scalar(sol[k]).amax();
    if resid > 1e-6 * scale * w.amax().max(1.0) {
        return Err(Error::numerical("local Gram matrix is singular; use reg > 0"));
    }
    let total = w.sum();
    Ok(w / total)
}

/// LLE reconstruction matrix over the `k` nearest neighbors of each row of `x`.
pub fn lle_reconstruction(x: &DMatrix<f64>, k: usize, reg: f64) -> Result<ReconstructionMatrix> {
    let neighbors = knn(x, k)?;
    let solutions: Vec<PointSolution> = neighbors
        .into_par_iter()
        .enumerate()
        .map(|(i, idx)| {
            let target = x.row(i).transpose();
            let n = DMatrix::from_columns(&idx.iter().map(|&j| x.row(j).transpose()).collect::<Vec<_>>());
            let alpha = lle_weights(&target, &n, reg)?;
            Ok(PointSolution {
                neighbors: idx,
                alpha,
                converged: true,
                iterations: 0,
            })
        })
        .collect::<Result<_>>()?;
    assemble_reconstruction_matrix(&solutions, x.nrows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Points on a 2-D plane in R^5; returns (spectra n x 5, parameters n x 2).
    fn plane(n: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = DMatrix::from_fn(n, 2, |_, _| rng.random_range(0.0..1.0));
        let a = DMatrix::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(1, 5, |_, _| rng.random_range(-1.0..1.0));
        let x = &t * &a + DMatrix::from_fn(n, 5, |_, j| b[(0, j)]);
        (x, t)
    }

    /// Relative residual of the best affine fit of `target` (n x q) from `y^T`.
    fn affine_fit_residual(y: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
        let n = y.ncols();
        let design = DMatrix::from_fn(n, y.nrows() + 1, |i, j| if j < y.nrows() { y[(j, i)] } else { 1.0 });
        let coef = (design.transpose() * &design).cholesky().unwrap().solve(&(design.transpose() * target));
        (&design * coef - target).norm() / target.norm()
    }

    #[test]
    fn plane_parameterization_is_recovered() {
        let (x, t) = plane(150, 1);
        let r = lle_reconstruction(&x, 8, 1e-10).unwrap();
        let e = embed(&r.r, 2).unwrap();
        assert!(affine_fit_residual(&e.y, &t) < 1e-6);
        assert!(e.warning.is_none());
    }

    #[test]
    fn rows_orthonormal_and_centered() {
        let (x, _) = plane(80, 2);
        let r = lle_reconstruction(&x, 6, 1e-3).unwrap();
        let e = embed(&r.r, 3).unwrap();
        assert!((&e.y * e.y.transpose() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-8);
        for row in e.y.row_iter() {
            assert!(row.mean().abs() < 1e-8);
        }
        assert_eq!(e.eigvals.len(), 4);
    }

    #[test]
    fn objective_equals_eigenvalue_sum() {
        let (x, _) = plane(60, 3);
        let r = lle_reconstruction(&x, 5, 1e-2).unwrap();
        let e = embed(&r.r, 2).unwrap();
        // rows of R hold coefficients, so points reconstruct as Y R^T
        let rd = r.r.to_dense();
        let obj = (&e.y - &e.y * rd.transpose()).norm_squared();
        let sum: f64 = e.eigvals[1..].iter().sum();
        assert!((obj - sum).abs() < 1e-8);
    }

    #[test]
    fn larger_plane_is_recovered() {
        let (x, t) = plane(700, 4);
        let r = lle_reconstruction(&x, 8, 1e-9).unwrap();
        let e = embed(&r.r, 2).unwrap();
        assert!(affine_fit_residual(&e.y, &t) < 1e-6);
        assert!((&e.y * e.y.transpose() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-8);
    }

    #[test]
    fn repeated_cutoff_is_reported() {
        // two disjoint cycles: null space of (I - R)^T (I - R) is 2-dimensional
        let n = 10;
        let rows = (0..n)
            .map(|i| {
                let base = (i / 5) * 5;
                vec![(base + (i + 1) % 5, 0.5), (base + (i + 4) % 5, 0.5)]
            })
            .collect();
        let r = SparseMatrix::from_rows(n, rows).unwrap();
        let e = embed(&r, 1).unwrap();
        assert!(e.eigvals[1].abs() < 1e-10);
        assert!(e.warning.is_none());
        let rows2 = (0..n).map(|i| vec![((i + 1) % n, 0.5), ((i + n - 1) % n, 0.5)]).collect();
        let ring = SparseMatrix::from_rows(n, rows2).unwrap();
        // a symmetric ring has doubly degenerate nonzero eigenvalues
        assert!(embed(&ring, 1).unwrap().warning.is_some());
    }

    #[test]
    fn split_examples() {
        let y = DMatrix::from_row_slice(1, 5, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let one = split_embeddings(&y, &[0; 5]).unwrap();
        assert_eq!(one[&0].y, y);
        let parts = split_embeddings(&y, &[1, 0, 1, 0, 2]).unwrap();
        assert_eq!(parts.values().map(|c| c.members.len()).sum::<usize>(), 5);
        let order: Vec<usize> = parts.values().flat_map(|c| c.members.clone()).collect();
        let joined: Vec<f64> = parts.values().flat_map(|c| c.y.iter().copied().collect::<Vec<_>>()).collect();
        assert_eq!(joined, order.iter().map(|&i| y[(0, i)]).collect::<Vec<_>>());
        assert!(split_embeddings(&y, &[0; 4]).is_err());
    }

    #[test]
    fn lle_exact_neighbor_is_one_hot() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let n = DMatrix::from_column_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 2.0, 3.0, 5.0, -1.0, 0.0]);
        let w = lle_weights(&x, &n, 0.0).unwrap();
        assert!((w - DVector::from_vec(vec![0.0, 1.0, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn lle_interpolates_with_d_plus_one_neighbors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let n = DMatrix::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
        let w = lle_weights(&x, &n, 0.0).unwrap();
        assert!((&n * &w - &x).norm() < 1e-8);
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lle_singular_without_reg_is_an_error() {
        let x = DVector::from_vec(vec![0.0, 0.0]);
        let n = DMatrix::from_column_slice(2, 4, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0]);
        let err = lle_weights(&x, &n, 0.0).unwrap_err();
        assert!(err.to_string().contains("reg > 0"));
        assert!(lle_weights(&x, &n, 1e-3).is_ok());
    }

    #[test]
    fn relabeling_points_permutes_embedding() {
        let (x, _) = plane(60, 6);
        let r = lle_reconstruction(&x, 6, 1e-3).unwrap();
        let n = x.nrows();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let rows = perm.iter().map(|&src| r.r.row(src).map(|(j, v)| (inv[j], v)).collect()).collect();
        let rp = SparseMatrix::from_rows(n, rows).unwrap();
        let a = embed(&r.r, 2).unwrap().y;
        let b = embed(&rp, 2).unwrap().y;
        let mapped = DMatrix::from_fn(2, n, |c, i| b[(c, inv[i])]);
        // same subspace, compare projectors
        let pa = a.transpose() * &a;
        let pb = mapped.transpose() * &mapped;
        assert!((pa - pb).amax() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn lle_weights_are_affine_invariant(seed in 0u64..1000, shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(40, 4, |_, _| rng.random_range(-1.0..1.0));
            let q = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)).qr().q();
            let moved = (&x * q * scale).add_scalar(shift);
            let a = lle_reconstruction(&x, 6, 1e-3).unwrap().r.to_dense();
            let b = lle_reconstruction(&moved, 6, 1e-3).unwrap().r.to_dense();
            prop_assert!((a - &b).amax() < 1e-8);
            for i in 0..40 {
                prop_assert!((b.row(i).sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
