//! Dense decompositions shared across the crate: singular values and
//! symmetric eigenproblems.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Above this size the iterative solver is used.
pub const DENSE_LIMIT: usize = 5000;

const EXTRA_BLOCK: usize = 8;
const MAX_ITERS: usize = 300;
const RESIDUAL_TOL: f64 = 1e-11;

/// Eigenpairs sorted by ascending eigenvalue; vectors are columns.
#[derive(Debug, Clone)]
pub struct Eigenpairs {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

fn check_square(a: &DMatrix<f64>, count: usize) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::dim(format!("eigenproblem needs a square matrix, got {}x{}", a.nrows(), a.ncols())));
    }
    if count == 0 || count > a.nrows() {
        return Err(Error::input(format!("requested {count} eigenpairs of a {}x{} matrix", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("matrix has non-finite entries"));
    }
    Ok(())
}

fn to_faer(a: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer(a: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Thin singular value decomposition with singular values in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl Svd {
    pub fn recompose(&self) -> DMatrix<f64> {
        &self.u * DMatrix::from_diagonal(&self.singular_values) * &self.v_t
    }
}

pub fn svd(a: &DMatrix<f64>) -> Result<Svd> {
    if a.is_empty() {
        return Ok(Svd {
            u: DMatrix::zeros(a.nrows(), 0),
            singular_values: DVector::zeros(0),
            v_t: DMatrix::zeros(0, a.ncols()),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("matrix has non-finite entries"));
    }
    let dec = to_faer(a)
        .thin_svd()
        .map_err(|_| Error::numerical("singular value decomposition did not converge"))?;
    let s = dec.S().column_vector();
    let mut order: Vec<usize> = (0..s.nrows()).collect();
    order.sort_by(|&x, &y| s[y].total_cmp(&s[x]).then(x.cmp(&y)));
    let (u, v) = (dec.U(), dec.V());
    Ok(Svd {
        u: DMatrix::from_fn(a.nrows(), order.len(), |i, c| u[(i, order[c])]),
        singular_values: DVector::from_fn(order.len(), |c, _| s[order[c]]),
        v_t: DMatrix::from_fn(order.len(), a.ncols(), |c, j| v[(j, order[c])]),
    })
}

/// Singular values in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    if a.is_empty() {
        return Ok(DVector::zeros(0));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("matrix has non-finite entries"));
    }
    let mut s = to_faer(a)
        .singular_values()
        .map_err(|_| Error::numerical("singular value decomposition did not converge"))?;
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(DVector::from_vec(s))
}

/// Flips each vector so its largest-magnitude entry is positive.
fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
}

fn sorted_pairs(values: &DVector<f64>, vectors: &DMatrix<f64>, count: usize) -> Eigenpairs {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let n = vectors.nrows();
    Eigenpairs {
        values: DVector::from_fn(count, |i, _| values[order[i]]),
        vectors: DMatrix::from_fn(n, count, |r, c| vectors[(r, order[c])]),
    }
}

/// Full dense decomposition, truncated to the `count` smallest pairs.
pub fn dense_smallest_eigenpairs(a: &DMatrix<f64>, count: usize) -> Result<Eigenpairs> {
    check_square(a, count)?;
    let sym = (a + a.transpose()) * 0.5;
    let eig = to_faer(&sym)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::numerical("symmetric eigendecomposition did not converge"))?;
    let s = eig.S().column_vector();
    let values = DVector::from_fn(s.nrows(), |i, _| s[i]);
    let mut out = sorted_pairs(&values, &from_faer(eig.U()), count);
    fix_signs(&mut out.vectors);
    Ok(out)
}

/// Block inverse iteration with a small diagonal shift and Rayleigh-Ritz
/// extraction. `a` must be positive semidefinite.
pub fn iterative_smallest_eigenpairs(a: &DMatrix<f64>, count: usize) -> Result<Eigenpairs> {
    check_square(a, count)?;
    let n = a.nrows();
    let block = (count + EXTRA_BLOCK).min(n);
    let sym = (a + a.transpose()) * 0.5;
    let scale = sym.diagonal().amax().max(f64::MIN_POSITIVE);

    let mut shift = 1e-10 * scale;
    let chol = loop {
        let mut shifted = to_faer(&sym);
        for i in 0..n {
            shifted[(i, i)] += shift;
        }
        if let Ok(c) = shifted.llt(Side::Lower) {
            break c;
        }
        shift *= 100.0;
        if shift > 1e-2 * scale {
            return Err(Error::numerical(
                "shifted matrix is not positive definite; eigenproblem input must be positive semidefinite",
            ));
        }
    };

    // deterministic, well-spread start block
    let mut q = DMatrix::from_fn(n, block, |i, j| {
        let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93);
        ((h >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    });
    let mut result = None;
    for _ in 0..MAX_ITERS {
        let y = from_faer(chol.solve(to_faer(&q)).as_ref());
        q = y.qr().q();
        let aq = &sym * &q;
        let h = q.tr_mul(&aq);
        let eig = ((&h + h.transpose()) * 0.5).symmetric_eigen();
        let ritz = sorted_pairs(&eig.eigenvalues, &eig.eigenvectors, block);
        let vectors = &q * &ritz.vectors;
        let avec = aq * &ritz.vectors;
        let converged = (0..count).all(|j| {
            let res = (avec.column(j) - vectors.column(j) * ritz.values[j]).norm();
            res <= RESIDUAL_TOL * scale
        });
        q = vectors;
        if converged {
            result = Some(ritz.values);
            break;
        }
    }
    let values = result.ok_or_else(|| Error::numerical("eigensolver did not converge"))?;
    let mut vectors = q.columns(0, count).into_owned();
    fix_signs(&mut vectors);
    Ok(Eigenpairs {
        values: values.rows(0, count).into_owned(),
        vectors,
    })
}

/// The `count` smallest eigenpairs of a symmetric positive semidefinite matrix.
pub fn smallest_eigenpairs(a: &DMatrix<f64>, count: usize) -> Result<Eigenpairs> {
    if a.nrows() <= DENSE_LIMIT {
        dense_smallest_eigenpairs(a, count)
    } else {
        iterative_smallest_eigenpairs(a, count)
    }
}

/// Orthonormal basis of the column space, via SVD with a relative rank cut.
pub fn column_basis(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if a.is_empty() {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let svd = match svd(a) {
        Ok(s) => s,
        Err(_) => return DMatrix::zeros(a.nrows(), 0),
    };
    let u = svd.u;
    let top = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rel_tol * top && top > 0.0)
        .collect();
    DMatrix::from_fn(a.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}
