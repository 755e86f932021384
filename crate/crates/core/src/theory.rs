//! Numerical checks of the norm inequalities behind the method and of the
//! subspace-dominance condition for two-dictionary representations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{solve_reconstruction, SolverOptions};
use crate::error::{Error, Result};
use crate::linalg::{column_basis, singular_values};
use crate::neighborhood::NeighborhoodProblem;

const UNIT_TOL: f64 = 1e-10;
const RANK_TOL: f64 = 1e-10;
/// Rounding allowance when comparing norms.
const SLACK_TOL: f64 = 1e-12;

/// `|D diag(z)|_*` for a dictionary with unit columns.
pub fn trace_lasso_norm(d: &DMatrix<f64>, z: &DVector<f64>) -> Result<f64> {
    if d.ncols() != z.len() {
        return Err(Error::dim(format!("dictionary has {} columns, vector has {} entries", d.ncols(), z.len())));
    }
    if let Some(j) = (0..d.ncols()).find(|&j| (d.column(j).norm() - 1.0).abs() > UNIT_TOL) {
        return Err(Error::input(format!("dictionary column {j} does not have unit norm")));
    }
    let mut w = d.clone();
    for (j, mut col) in w.column_iter_mut().enumerate() {
        col *= z[j];
    }
    Ok(singular_values(&w)?.sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormChain {
    pub name: String,
    pub lower: f64,
    pub middle: f64,
    pub upper: f64,
}

impl NormChain {
    /// Smallest gap in `lower <= middle <= upper`; negative means a violation.
    pub fn slack(&self) -> f64 {
        (self.middle - self.lower).min(self.upper - self.middle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormCheck {
    pub chains: Vec<NormChain>,
    pub min_slack: f64,
    pub holds: bool,
}

/// Evaluates the five chains between the inf, 1, 2 and trace-Lasso norms.
pub fn check_norm_propositions(z: &DVector<f64>, d: &DMatrix<f64>) -> Result<NormCheck> {
    let n = z.len() as f64;
    let inf = z.amax();
    let l1 = z.lp_norm(1);
    let l2 = z.norm();
    let omega = trace_lasso_norm(d, z)?;
    let chains = vec![
        NormChain { name: "inf<=1<=n*inf".into(), lower: inf, middle: l1, upper: n * inf },
        NormChain { name: "inf<=2<=sqrt(n)*inf".into(), lower: inf, middle: l2, upper: n.sqrt() * inf },
        NormChain { name: "2<=1<=sqrt(n)*2".into(), lower: l2, middle: l1, upper: n.sqrt() * l2 },
        NormChain { name: "2<=omega<=sqrt(n)*2".into(), lower: l2, middle: omega, upper: n.sqrt() * l2 },
        NormChain { name: "omega<=1<=sqrt(n)*omega".into(), lower: omega, middle: l1, upper: n.sqrt() * omega },
    ];
    let min_slack = chains.iter().map(NormChain::slack).fold(f64::INFINITY, f64::min);
    let scale = l1.max(f64::MIN_POSITIVE);
    Ok(NormCheck {
        holds: min_slack >= -SLACK_TOL * scale * n.max(1.0),
        min_slack,
        chains,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSelector {
    One,
    Two,
    Inf,
    TraceLasso,
}

impl NormSelector {
    pub fn constant(self, n: usize) -> f64 {
        match self {
            NormSelector::Inf => n as f64,
            _ => (n as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpdReport {
    /// Smallest nonzero singular value of the own-subspace dictionary.
    pub sigma_min: f64,
    /// First principal angle between the two column spans, radians.
    pub theta_min: f64,
    /// Largest column norm of the other-subspace dictionary.
    pub max_col_norm: f64,
    /// Largest column norm of the own-subspace dictionary.
    pub max_col_norm_own: f64,
    pub k_p: f64,
    /// `sigma_min > k_p * max_col_norm * cos(theta_min)`.
    pub condition_holds: bool,
    /// Same test with `max_col_norm_own` in place of `max_col_norm`.
    pub own_norm_condition_holds: bool,
}

fn max_col_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Cosine of the first principal angle between two column spans.
pub fn first_principal_cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (ua, ub) = (column_basis(a, RANK_TOL), column_basis(b, RANK_TOL));
    if ua.ncols() == 0 || ub.ncols() == 0 {
        return 0.0;
    }
    singular_values(&ua.tr_mul(&ub)).map_or(f64::NAN, |s| s[0].min(1.0))
}

/// Evaluates the dominance condition for representing points of the span of
/// `own` with columns of `own` rather than `other`.
pub fn ipd_condition(own: &DMatrix<f64>, other: &DMatrix<f64>, p: NormSelector) -> Result<IpdReport> {
    if own.is_empty() || other.is_empty() {
        return Err(Error::input("both dictionaries must be nonempty"));
    }
    if own.nrows() != other.nrows() {
        return Err(Error::dim(format!("dictionaries have {} and {} rows", own.nrows(), other.nrows())));
    }
    let sv = singular_values(own)?;
    let top = sv.max();
    let sigma_min = sv.iter().copied().filter(|&s| s > RANK_TOL * top).fold(f64::INFINITY, f64::min);
    let sigma_min = if sigma_min.is_finite() { sigma_min } else { 0.0 };
    let cos = first_principal_cosine(own, other);
    let k_p = p.constant(other.ncols());
    let max_other = max_col_norm(other);
    let max_own = max_col_norm(own);
    Ok(IpdReport {
        sigma_min,
        theta_min: cos.acos(),
        max_col_norm: max_other,
        max_col_norm_own: max_own,
        k_p,
        condition_holds: sigma_min > k_p * max_other * cos,
        own_norm_condition_holds: sigma_min > k_p * max_own * cos,
    })
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn unit_columns(mut a: DMatrix<f64>) -> DMatrix<f64> {
    for mut c in a.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    a
}

/// Random dictionary whose columns are partly correlated, so the trace-Lasso
/// norm falls strictly between its endpoints.
fn random_dictionary(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let rank = rng.random_range(1..=rows.min(cols));
    let basis = normal_matrix(rows, rank, rng);
    let mix = normal_matrix(rank, cols, rng);
    let noise = normal_matrix(rows, cols, rng) * rng.random_range(0.0..1.0);
    unit_columns(basis * mix + noise)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormSuiteReport {
    pub trials: usize,
    pub violations: usize,
    pub min_slack: Option<f64>,
    pub instances: Vec<NormCheck>,
}

/// Random `(z, D)` pairs with `z` of length at most `max_n`.
pub fn norm_suite(trials: usize, max_n: usize, seed: u64) -> NormSuiteReport {
    let max_n = max_n.max(1);
    let instances: Vec<NormCheck> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let n = rng.random_range(1..=max_n);
            let rows = rng.random_range(1..=max_n);
            let d = random_dictionary(rows, n, &mut rng);
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 10f64.powf(rng.random_range(-3.0..3.0)));
            check_norm_propositions(&z, &d).expect("dictionary built with unit columns")
        })
        .collect();
    NormSuiteReport {
        trials,
        violations: instances.iter().filter(|c| !c.holds).count(),
        min_slack: instances.iter().map(|c| c.min_slack).min_by(f64::total_cmp),
        instances,
    }
}

/// Two random subspaces of `ambient` sharing `shared` dimensions, with
/// `cols` sample columns drawn from each.
pub fn two_subspace_instance(
    ambient: usize,
    dim: usize,
    shared: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let q = normal_matrix(ambient, ambient, rng).qr().q();
    let basis_a = q.columns(0, dim).into_owned();
    let mut idx: Vec<usize> = (0..shared).collect();
    idx.extend(dim..dim + (dim - shared));
    let basis_b = q.select_columns(idx.iter());
    let a = unit_columns(&basis_a * normal_matrix(dim, cols, rng));
    let b = unit_columns(&basis_b * normal_matrix(dim, cols, rng));
    (a, b)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IpdTrial {
    pub report: IpdReport,
    /// Share of coefficient magnitude placed on own-subspace columns.
    pub own_mass: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IpdSuiteReport {
    pub trials: usize,
    pub lambda: f64,
    pub condition_held: usize,
    /// Trials where the condition held but own-subspace mass was at most 95%.
    pub counterexamples: usize,
    pub instances: Vec<IpdTrial>,
}

/// Own-subspace coefficient mass when representing a point of one subspace
/// over the union of both dictionaries.
pub fn own_subspace_mass(own: &DMatrix<f64>, other: &DMatrix<f64>, target: &DVector<f64>, lambda: f64) -> Result<f64> {
    let n = DMatrix::from_columns(
        &own.column_iter()
            .chain(other.column_iter())
            .map(|c| c.into_owned())
            .collect::<Vec<_>>(),
    );
    let neighbors = (1..=n.ncols()).collect();
    let problem = NeighborhoodProblem::new(0, target.clone(), neighbors, n)?;
    let sol = solve_reconstruction(&problem, &SolverOptions::with_lambda(lambda))?;
    let own_mass: f64 = sol.alpha.rows(0, own.ncols()).abs().sum();
    let total = sol.alpha.abs().sum();
    Ok(if total > 0.0 { own_mass / total } else { 0.0 })
}

/// Randomized dominance-condition trials in `R^20`.
pub fn ipd_suite(trials: usize, lambda: f64, seed: u64) -> Result<IpdSuiteReport> {
    let instances: Vec<IpdTrial> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let dim = rng.random_range(2..=4);
            let shared = rng.random_range(1..dim);
            let cols = rng.random_range(dim + 1..=10);
            let (own, other) = two_subspace_instance(20, dim, shared, cols, &mut rng);
            let report = ipd_condition(&own, &other, NormSelector::TraceLasso)?;
            let weights = DVector::from_fn(cols, |_, _| rng.random_range(0.0..1.0));
            let target = &own * (&weights / weights.sum());
            let own_mass = own_subspace_mass(&own, &other, &target, lambda)?;
            Ok(IpdTrial { report, own_mass })
        })
        .collect::<Result<_>>()?;
    let held: Vec<&IpdTrial> = instances.iter().filter(|t| t.report.condition_holds).collect();
    Ok(IpdSuiteReport {
        trials,
        lambda,
        condition_held: held.len(),
        counterexamples: held.iter().filter(|t| t.own_mass <= 0.95).count(),
        instances,
    })
}
