//! Low-rank neighborhood reconstruction.
//!
//! For a target `x` with raw neighbors `N` (D x k) and normalized neighbors
//! `N_hat`, solves
//!
//! ```text
//! minimize_a   1/2 |x - N a|^2 + lambda |N_hat diag(a)|_*
//! subject to   1^T a = 1
//! ```
//!
//! by ADMM on the split `V = N_hat diag(a)` with augmented Lagrangian
//!
//! ```text
//! L(V, a, L1, L2) = 1/2 |x - N a|^2 + lambda |V|_*
//!                 + beta/2 (1^T a - 1 + L1/beta)^2
//!                 + beta/2 |V - N_hat diag(a) + L2/beta|_F^2
//! ```
//!
//! Each sweep updates `V` by singular value thresholding, `a` by the
//! stationary point of the (quadratic) a-subproblem, then the multipliers.

mod leading;
pub mod oracle;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affinity::PointSolution;
use crate::error::{Error, Result};
use crate::neighborhood::NeighborhoodProblem;

pub use oracle::oracle_solve_small;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Weight of the trace-Lasso penalty.
    pub lambda: f64,
    /// ADMM penalty parameter, held constant.
    pub beta: f64,
    pub max_iters: usize,
    pub tol_primal: f64,
    pub tol_alpha: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            lambda: 0.01,
            beta: 1.0,
            max_iters: 500,
            tol_primal: 1e-6,
            tol_alpha: 1e-8,
        }
    }
}

impl SolverOptions {
    pub fn with_lambda(lambda: f64) -> Self {
        SolverOptions {
            lambda,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::input(format!("lambda: must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::input(format!("beta: must be finite and > 0, got {}", self.beta)));
        }
        if !(self.tol_primal > 0.0) {
            return Err(Error::input(format!("tol_primal: must be > 0, got {}", self.tol_primal)));
        }
        if !(self.tol_alpha > 0.0) {
            return Err(Error::input(format!("tol_alpha: must be > 0, got {}", self.tol_alpha)));
        }
        if self.max_iters == 0 {
            return Err(Error::input("max_iters: must be at least 1"));
        }
        Ok(())
    }
}

/// Variables of the augmented Lagrangian.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub v: DMatrix<f64>,
    pub alpha: DVector<f64>,
    pub lambda1: f64,
    pub lambda2: DMatrix<f64>,
    pub beta: f64,
    pub iter: usize,
}

impl AdmmState {
    /// Uniform affine weights, `V = N_hat diag(a)` and zero multipliers.
    pub fn initial(n_hat: &DMatrix<f64>, beta: f64) -> Self {
        let k = n_hat.ncols();
        let alpha = DVector::from_element(k, 1.0 / k as f64);
        AdmmState {
            v: weighted_neighborhood(n_hat, &alpha),
            alpha,
            lambda1: 0.0,
            lambda2: DMatrix::zeros(n_hat.nrows(), k),
            beta,
            iter: 0,
        }
    }
}

/// `N_hat diag(a)`.
pub fn weighted_neighborhood(n_hat: &DMatrix<f64>, alpha: &DVector<f64>) -> DMatrix<f64> {
    let mut m = n_hat.clone();
    for (mut col, a) in m.column_iter_mut().zip(alpha.iter()) {
        col *= *a;
    }
    m
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    crate::linalg::singular_values(m).map_or(f64::NAN, |s| s.sum())
}

/// Proximal operator of `tau |.|_*`: soft-thresholds the singular values.
pub fn svt(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    assert!(tau >= 0.0, "threshold must be nonnegative");
    if tau == 0.0 || m.is_empty() {
        return m.clone();
    }
    let Ok(svd) = crate::linalg::svd(m) else {
        return m.map(|_| f64::NAN);
    };
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, s) in svd.singular_values.iter().enumerate() {
        let shrunk = s - tau;
        if shrunk > 0.0 {
            out.ger(shrunk, &svd.u.column(i), &svd.v_t.row(i).transpose(), 1.0);
        }
    }
    out
}

/// `V = svt(N_hat diag(a) - L2/beta, lambda/beta)`.
pub fn update_v(state: &AdmmState, n_hat: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let t = weighted_neighborhood(n_hat, &state.alpha);
    svt(&(t - &state.lambda2 / state.beta), lambda / state.beta)
}

/// Assembles the k x k system of the a-update,
/// `N^T N + beta 1 1^T + beta Q` with `Q = diag(|n_hat_i|^2)`.
fn alpha_system(n: &DMatrix<f64>, n_hat: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let k = n.ncols();
    let mut a = n.tr_mul(n);
    a.add_scalar_mut(beta);
    for i in 0..k {
        a[(i, i)] += beta * n_hat.column(i).norm_squared();
    }
    a
}

/// Right-hand side `N^T x + beta 1 F1 + beta P` with `F1 = 1 - L1/beta` and
/// `P_i = n_hat_i . (v_i + l2_i / beta)`.
fn alpha_rhs(
    ntx: &DVector<f64>,
    n_hat: &DMatrix<f64>,
    v: &DMatrix<f64>,
    lambda1: f64,
    lambda2: &DMatrix<f64>,
    beta: f64,
) -> DVector<f64> {
    let f1 = 1.0 - lambda1 / beta;
    DVector::from_fn(ntx.len(), |i, _| {
        let p = n_hat
            .column(i)
            .iter()
            .zip(v.column(i).iter().zip(lambda2.column(i).iter()))
            .map(|(h, (vi, li))| h * (vi + li / beta))
            .sum::<f64>();
        ntx[i] + beta * f1 + beta * p
    })
}

enum Factor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factor {
    fn new(a: DMatrix<f64>) -> Result<Self> {
        if let Some(c) = a.clone().cholesky() {
            return Ok(Factor::Cholesky(c));
        }
        let lu = a.lu();
        if !lu.is_invertible() {
            return Err(Error::numerical(
                "a-update system N^T N + beta 1 1^T + beta Q is singular; \
                 check for duplicate neighbors and use beta > 0",
            ));
        }
        Ok(Factor::Lu(lu))
    }

    fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Factor::Cholesky(c) => Ok(c.solve(b)),
            Factor::Lu(lu) => lu
                .solve(b)
                .ok_or_else(|| Error::numerical("a-update solve failed")),
        }
    }
}

/// Stationary point of the a-subproblem for the current `V`, `L1`, `L2`.
pub fn update_alpha(
    state: &AdmmState,
    x: &DVector<f64>,
    n: &DMatrix<f64>,
    n_hat: &DMatrix<f64>,
    beta: f64,
) -> Result<DVector<f64>> {
    let factor = Factor::new(alpha_system(n, n_hat, beta))?;
    let rhs = alpha_rhs(&n.tr_mul(x), n_hat, &state.v, state.lambda1, &state.lambda2, beta);
    factor.solve(&rhs)
}

/// Dual ascent on both multipliers.
pub fn update_multipliers(
    state: &AdmmState,
    alpha: &DVector<f64>,
    v: &DMatrix<f64>,
    n_hat: &DMatrix<f64>,
    beta: f64,
) -> (f64, DMatrix<f64>) {
    let lambda1 = state.lambda1 + beta * (alpha.sum() - 1.0);
    let lambda2 = &state.lambda2 + (v - weighted_neighborhood(n_hat, alpha)) * beta;
    (lambda1, lambda2)
}

/// `1/2 |x - N a|^2 + lambda |N_hat diag(a)|_*`.
pub fn objective(
    x: &DVector<f64>,
    n: &DMatrix<f64>,
    n_hat: &DMatrix<f64>,
    alpha: &DVector<f64>,
    lambda: f64,
) -> f64 {
    let resid = x - n * alpha;
    let penalty = if lambda == 0.0 {
        0.0
    } else {
        nuclear_norm(&weighted_neighborhood(n_hat, alpha))
    };
    0.5 * resid.norm_squared() + lambda * penalty
}

/// Value of the augmented Lagrangian at `(state.v, alpha, state.lambda1, state.lambda2)`.
pub fn augmented_lagrangian(
    state: &AdmmState,
    alpha: &DVector<f64>,
    x: &DVector<f64>,
    n: &DMatrix<f64>,
    n_hat: &DMatrix<f64>,
    lambda: f64,
) -> f64 {
    let beta = state.beta;
    let fit = 0.5 * (x - n * alpha).norm_squared();
    let affine = alpha.sum() - 1.0 + state.lambda1 / beta;
    let coupling = &state.v - weighted_neighborhood(n_hat, alpha) + &state.lambda2 / beta;
    fit + lambda * nuclear_norm(&state.v)
        + 0.5 * beta * affine * affine
        + 0.5 * beta * coupling.norm_squared()
}

/// Per-point solver output.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub alpha: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `|1^T a - 1|` at exit.
    pub affine_residual: f64,
    /// `|V - N_hat diag(a)|_F` at exit.
    pub coupling_residual: f64,
    /// `max(affine, coupling)` after every sweep.
    pub residual_history: Vec<f64>,
}

/// Runs ADMM on one neighborhood until the primal residuals and the change
/// in `a` fall below tolerance, or `max_iters` sweeps.
///
/// Hitting the iteration cap is not an error; it is reported through
/// `converged = false`.
pub fn solve_reconstruction(problem: &NeighborhoodProblem, opts: &SolverOptions) -> Result<Reconstruction> {
    opts.validate()?;
    let k = problem.k();
    if k < 2 {
        return Err(Error::input(format!("reconstruction needs k >= 2 neighbors, got {k}")));
    }
    let beta = opts.beta;
    let factor = Factor::new(alpha_system(&problem.n, &problem.n_hat, beta))?;
    let ntx = problem.n.tr_mul(&problem.x);

    // V and L2 stay in the column space of N_hat, so iterate in coordinates
    // of an orthonormal basis of it; SVT and Frobenius norms are unchanged.
    let n_hat = if problem.n_hat.nrows() > k {
        problem.n_hat.clone().qr().r()
    } else {
        problem.n_hat.clone()
    };

    let (r, kk) = n_hat.shape();
    let h = n_hat.as_slice();
    let mut alpha = DVector::from_element(k, 1.0 / k as f64);
    let mut lambda1 = 0.0;
    let mut lambda2 = DMatrix::<f64>::zeros(r, kk);
    let mut t = DMatrix::<f64>::zeros(r, kk);
    let mut leading = leading::LeadingSubspace::new(k);
    let mut rhs = DVector::zeros(k);
    let mut history = Vec::new();
    let mut affine = f64::INFINITY;
    let mut coupling = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        for j in 0..k {
            let a = alpha[j];
            let range = j * r..(j + 1) * r;
            for ((ti, hi), li) in t.as_mut_slice()[range.clone()].iter_mut().zip(&h[range.clone()]).zip(&lambda2.as_slice()[range]) {
                *ti = hi * a - li / beta;
            }
        }
        let v = leading.threshold(&t, opts.lambda / beta);
        for j in 0..k {
            let range = j * r..(j + 1) * r;
            let p = h[range.clone()]
                .iter()
                .zip(&v.as_slice()[range.clone()])
                .zip(&lambda2.as_slice()[range])
                .map(|((hi, vi), li)| hi * (beta * vi + li))
                .sum::<f64>();
            rhs[j] = ntx[j] + beta - lambda1 + p;
        }
        let next = factor.solve(&rhs)?;
        if next.iter().any(|a| !a.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite coefficients for point {} at iteration {iterations}",
                problem.target_index
            )));
        }
        let sum = next.sum();
        lambda1 += beta * (sum - 1.0);
        let mut coupling_sq = 0.0;
        for j in 0..k {
            let a = next[j];
            let range = j * r..(j + 1) * r;
            for ((li, hi), vi) in lambda2.as_mut_slice()[range.clone()].iter_mut().zip(&h[range.clone()]).zip(&v.as_slice()[range]) {
                let d = vi - hi * a;
                coupling_sq += d * d;
                *li += beta * d;
            }
        }
        affine = (sum - 1.0).abs();
        coupling = coupling_sq.sqrt();
        let step = (&next - &alpha).norm();
        alpha = next;
        iterations += 1;
        history.push(affine.max(coupling));
        if affine < opts.tol_primal && coupling < opts.tol_primal && step < opts.tol_alpha {
            converged = true;
            break;
        }
    }

    Ok(Reconstruction {
        alpha,
        converged,
        iterations,
        affine_residual: affine,
        coupling_residual: coupling,
        residual_history: history,
    })
}

/// Solves every neighborhood in parallel; results are in problem order.
pub fn solve_all(problems: &[NeighborhoodProblem], opts: &SolverOptions) -> Result<Vec<PointSolution>> {
    problems
        .par_iter()
        .map(|p| {
            let r = solve_reconstruction(p, opts)?;
            Ok(PointSolution {
                neighbors: p.neighbor_indices.clone(),
                alpha: r.alpha,
                converged: r.converged,
                iterations: r.iterations,
            })
        })
        .collect()
}
