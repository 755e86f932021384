//! Singular value thresholding through the leading right singular subspace.
//!
//! Inside the solver the thresholded matrix changes little between sweeps
//! and only a handful of its singular values exceed the threshold, so a
//! warm-started block subspace iteration on `M^T M` replaces the full SVD.
//! Whenever the block fails to converge or grows past half the width the
//! full decomposition is used instead.

use nalgebra::DMatrix;

const INITIAL_BLOCK: usize = 4;
const OVERSAMPLE: usize = 3;
const MAX_SWEEPS: usize = 8;
const RESIDUAL_TOL: f64 = 1e-12;
const EXCLUDED_TOL: f64 = 1e-4;

pub(crate) struct LeadingSubspace {
    basis: DMatrix<f64>,
    pub(crate) full_decompositions: usize,
}

fn filler(rows: usize, cols: usize, offset: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| {
        let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ ((j + offset) as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        ((h >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    })
}

/// `a * b` on column slices.
pub(crate) fn mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, k) = a.shape();
    debug_assert_eq!(k, b.nrows());
    let nb = b.ncols();
    let mut out = DMatrix::zeros(r, nb);
    let (ad, bd) = (a.as_slice(), b.as_slice());
    for (oc, bc) in out.as_mut_slice().chunks_exact_mut(r).zip(bd.chunks_exact(k)) {
        for (aj, s) in ad.chunks_exact(r).zip(bc) {
            for (o, x) in oc.iter_mut().zip(aj) {
                *o += x * s;
            }
        }
    }
    out
}

/// `a^T * b` on column slices.
pub(crate) fn tr_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let r = a.nrows();
    debug_assert_eq!(r, b.nrows());
    let (ka, nb) = (a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(ka, nb);
    if r == 0 {
        return out;
    }
    for (oc, bc) in out.as_mut_slice().chunks_exact_mut(ka).zip(b.as_slice().chunks_exact(r)) {
        for (o, aj) in oc.iter_mut().zip(a.as_slice().chunks_exact(r)) {
            *o = dot(aj, bc);
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Orthonormalizes the columns of `y` in place (Gram-Schmidt, two passes).
/// Returns false if the columns are numerically dependent.
fn orthonormalize(y: &mut DMatrix<f64>) -> bool {
    let (k, b) = y.shape();
    let data = y.as_mut_slice();
    for c in 0..b {
        let norm0 = dot(&data[c * k..(c + 1) * k], &data[c * k..(c + 1) * k]).sqrt();
        for _ in 0..2 {
            for p in 0..c {
                let (prev, cur) = data.split_at_mut(c * k);
                let q = &prev[p * k..(p + 1) * k];
                let cur = &mut cur[..k];
                let proj = dot(q, cur);
                for (x, qi) in cur.iter_mut().zip(q) {
                    *x -= proj * qi;
                }
            }
        }
        let col = &mut data[c * k..(c + 1) * k];
        let norm = dot(col, col).sqrt();
        if !(norm > 1e-10 * norm0) || norm == 0.0 {
            return false;
        }
        col.iter_mut().for_each(|x| *x /= norm);
    }
    true
}

impl LeadingSubspace {
    pub(crate) fn new(width: usize) -> Self {
        LeadingSubspace {
            basis: filler(width, INITIAL_BLOCK.min(width), 0),
            full_decompositions: 0,
        }
    }

    fn full(&mut self, m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
        self.full_decompositions += 1;
        let Ok(svd) = crate::linalg::svd(m) else {
            return m.map(|_| f64::NAN);
        };
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        let mut kept = 0;
        for (i, s) in svd.singular_values.iter().enumerate() {
            let shrunk = s - tau;
            if shrunk > 0.0 {
                out.ger(shrunk, &svd.u.column(i), &svd.v_t.row(i).transpose(), 1.0);
                kept += 1;
            }
        }
        let b = (kept + OVERSAMPLE).max(INITIAL_BLOCK).min(svd.singular_values.len());
        self.basis = DMatrix::from_fn(m.ncols(), b, |r, c| svd.v_t[(c, r)]);
        out
    }

    /// Same result as [`super::svt`] up to rounding.
    pub(crate) fn threshold(&mut self, m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
        let k = m.ncols();
        if tau == 0.0 || m.is_empty() {
            return m.clone();
        }
        let tau2 = tau * tau;
        // the largest singular value is bounded by the Frobenius norm
        if dot(m.as_slice(), m.as_slice()) <= tau2 {
            return DMatrix::zeros(m.nrows(), k);
        }
        'grow: loop {
            let b = self.basis.ncols();
            if 2 * b > k || 2 * b > m.nrows() {
                return self.full(m, tau);
            }
            let mut y = self.basis.clone();
            for _ in 0..MAX_SWEEPS {
                if !orthonormalize(&mut y) {
                    return self.full(m, tau);
                }
                let mq = mul(m, &y);
                let eig = tr_mul(&mq, &mq).symmetric_eigen();
                let mut order: Vec<usize> = (0..b).collect();
                order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
                let w = DMatrix::from_fn(b, b, |r, c| eig.eigenvectors[(r, order[c])]);
                let theta: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
                self.basis = mul(&y, &w);
                let mv = mul(&mq, &w);
                let g = tr_mul(m, &mv);

                let top = theta[0];
                if top <= 0.0 {
                    return DMatrix::zeros(m.nrows(), k);
                }
                let kept = theta.iter().take_while(|t| **t > tau2).count();
                let mut done = true;
                for j in 0..b.min(kept + 1) {
                    let res = g
                        .column(j)
                        .iter()
                        .zip(self.basis.column(j).iter())
                        .map(|(gi, vi)| (gi - vi * theta[j]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if j < kept {
                        done &= res <= RESIDUAL_TOL * top;
                    } else {
                        done &= res <= EXCLUDED_TOL * top && theta[j] + res < tau2;
                    }
                }
                if !done {
                    y = g;
                    continue;
                }
                if kept == b {
                    let extra = filler(k, OVERSAMPLE, b);
                    let basis = &self.basis;
                    self.basis = DMatrix::from_fn(k, b + OVERSAMPLE, |r, c| {
                        if c < b { basis[(r, c)] } else { extra[(r, c - b)] }
                    });
                    continue 'grow;
                }
                let mut out = DMatrix::zeros(m.nrows(), k);
                for j in 0..kept {
                    let scale = 1.0 - tau / theta[j].sqrt();
                    out.ger(scale, &mv.column(j), &self.basis.column(j), 1.0);
                }
                let keep = (kept + OVERSAMPLE).max(INITIAL_BLOCK).min(b);
                if keep < b {
                    self.basis = self.basis.columns(0, keep).into_owned();
                }
                return out;
            }
            return self.full(m, tau);
        }
    }
}
