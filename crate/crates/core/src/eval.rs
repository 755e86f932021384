//! Clustering and embedding quality metrics.

use std::collections::{BTreeMap, BTreeSet};

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::SpectralDataset;
use crate::error::{Error, Result};

/// Label counts up to this size are matched by trying every permutation.
pub const EXHAUSTIVE_LABELS: usize = 6;
const FCLS_TOL: f64 = 1e-12;
const FCLS_MAX_STEPS: usize = 200;

/// Minimum-cost assignment of rows to distinct columns (`rows <= cols`).
/// Returns the column chosen for each row.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (n, m) = (cost.nrows(), cost.ncols());
    if n > m {
        return Err(Error::dim(format!("assignment needs rows <= cols, got {n}x{m}")));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("assignment costs must be finite"));
    }
    // potentials over 1-based indices; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Best one-to-one matching of predicted labels onto true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatching {
    /// Predicted label to true label; predicted labels left unmatched are absent.
    pub map: BTreeMap<usize, usize>,
    pub mismatches: usize,
}

pub fn match_labels(pred: &[usize], truth: &[usize]) -> Result<LabelMatching> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!("{} predicted labels for {} true labels", pred.len(), truth.len())));
    }
    let p_ids: Vec<usize> = pred.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let t_ids: Vec<usize> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let size = p_ids.len().max(t_ids.len());
    let mut agree = DMatrix::<f64>::zeros(size, size);
    for (a, b) in pred.iter().zip(truth) {
        let r = p_ids.binary_search(a).expect("collected above");
        let c = t_ids.binary_search(b).expect("collected above");
        agree[(r, c)] += 1.0;
    }
    let assignment: Vec<usize> = if size <= EXHAUSTIVE_LABELS {
        (0..size)
            .permutations(size)
            .max_by(|a, b| {
                let score = |perm: &Vec<usize>| perm.iter().enumerate().map(|(r, &c)| agree[(r, c)]).sum::<f64>();
                score(a).total_cmp(&score(b)).then_with(|| b.cmp(a))
            })
            .unwrap_or_default()
    } else {
        hungarian(&agree.map(|v| -v))?
    };
    let matched: f64 = assignment.iter().enumerate().map(|(r, &c)| agree[(r, c)]).sum();
    let map = assignment
        .iter()
        .enumerate()
        .filter(|&(r, &c)| r < p_ids.len() && c < t_ids.len())
        .map(|(r, &c)| (p_ids[r], t_ids[c]))
        .collect();
    Ok(LabelMatching {
        map,
        mismatches: pred.len() - matched as usize,
    })
}

/// Percentage of points mislabelled under the best label permutation.
pub fn misclassification_rate(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Ok(0.0);
    }
    let m = match_labels(pred, truth)?;
    Ok(100.0 * m.mismatches as f64 / pred.len() as f64)
}

fn check_affinely_independent(v: &DMatrix<f64>) -> Result<()> {
    let n_e = v.ncols();
    if n_e < 2 {
        return Err(Error::input(format!("fcls needs at least 2 endmembers, got {n_e}")));
    }
    let diffs = DMatrix::from_fn(v.nrows(), n_e - 1, |r, c| v[(r, c + 1)] - v[(r, 0)]);
    let sv = crate::linalg::singular_values(&diffs)?;
    let top = v.amax().max(f64::MIN_POSITIVE);
    if sv.len() < n_e - 1 || sv.min() <= 1e-10 * top {
        return Err(Error::input("embedded endmembers are affinely dependent; abundances are not identifiable"));
    }
    Ok(())
}

/// Least squares over the affine hull of the columns in `active`.
fn affine_solve(g: &DMatrix<f64>, vty: &DVector<f64>, active: &[usize]) -> Result<DVector<f64>> {
    let s = active.len();
    let mut kkt = DMatrix::zeros(s + 1, s + 1);
    let mut rhs = DVector::zeros(s + 1);
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            kkt[(a, b)] = g[(i, j)];
        }
        kkt[(a, s)] = 1.0;
        kkt[(s, a)] = 1.0;
        rhs[a] = vty[i];
    }
    rhs[s] = 1.0;
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("singular system in fcls"))?;
    Ok(sol.rows(0, s).into_owned())
}

fn fcls_point(v: &DMatrix<f64>, g: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let n_e = v.ncols();
    let vty = v.tr_mul(y);
    let nearest = (0..n_e)
        .min_by(|&a, &b| (v.column(a) - y).norm().total_cmp(&(v.column(b) - y).norm()))
        .expect("at least two endmembers");
    let mut w = DVector::zeros(n_e);
    w[nearest] = 1.0;
    let mut active = vec![nearest];
    let scale = g.amax().max(1.0) * (1.0 + y.norm());

    for _ in 0..FCLS_MAX_STEPS {
        let sub = affine_solve(g, &vty, &active)?;
        if sub.iter().all(|&x| x >= -FCLS_TOL) {
            w.fill(0.0);
            for (a, &i) in active.iter().enumerate() {
                w[i] = sub[a].max(0.0);
            }
            // multipliers of the inactive bounds
            let grad = g * &w - &vty;
            let nu = -active.iter().map(|&i| grad[i]).sum::<f64>() / active.len() as f64;
            let entering = (0..n_e)
                .filter(|i| !active.contains(i))
                .map(|i| (i, grad[i] + nu))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match entering {
                Some((i, m)) if m < -1e-12 * scale => {
                    active.push(i);
                    active.sort_unstable();
                }
                _ => return Ok(w),
            }
        } else {
            // move toward the subproblem solution until a weight reaches zero
            let mut step = 1.0f64;
            let mut blocking = None;
            for (a, &i) in active.iter().enumerate() {
                if sub[a] < 0.0 {
                    let t = w[i] / (w[i] - sub[a]);
                    if t < step {
                        step = t;
                        blocking = Some(i);
                    }
                }
            }
            for (a, &i) in active.iter().enumerate() {
                w[i] += step * (sub[a] - w[i]);
            }
            if let Some(i) = blocking {
                w[i] = 0.0;
            }
            active.retain(|&i| w[i] > 0.0);
            if active.is_empty() {
                return Err(Error::numerical("fcls active set emptied"));
            }
        }
    }
    Err(Error::numerical("fcls did not terminate"))
}

/// Fully constrained abundances of each column of `y_pts` against the
/// columns of `v_y`. Returns one row per point.
pub fn fcls(y_pts: &DMatrix<f64>, v_y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if y_pts.nrows() != v_y.nrows() {
        return Err(Error::dim(format!(
            "points have {} coordinates, endmembers {}",
            y_pts.nrows(),
            v_y.nrows()
        )));
    }
    check_affinely_independent(v_y)?;
    let g = v_y.tr_mul(v_y);
    let mut out = DMatrix::zeros(y_pts.ncols(), v_y.ncols());
    for (p, y) in y_pts.column_iter().enumerate() {
        let mut w = fcls_point(v_y, &g, &y.into_owned())?;
        w.apply(|x| *x = x.max(0.0));
        let s = w.sum();
        w /= s;
        out.row_mut(p).copy_from(&w.transpose());
    }
    Ok(out)
}

/// Mean per-point l2 abundance error divided by the endmember count.
pub fn embedding_error(y_cluster: &DMatrix<f64>, endmember_cols: &DMatrix<f64>, true_w: &DMatrix<f64>) -> Result<f64> {
    let m = y_cluster.ncols();
    if m == 0 {
        return Err(Error::input("no points to score"));
    }
    if true_w.nrows() != m || true_w.ncols() != endmember_cols.ncols() {
        return Err(Error::dim(format!(
            "true abundances are {}x{}, expected {m}x{}",
            true_w.nrows(),
            true_w.ncols(),
            endmember_cols.ncols()
        )));
    }
    let est = fcls(y_cluster, endmember_cols)?;
    let total: f64 = (0..m).map(|i| (est.row(i) - true_w.row(i)).norm()).sum();
    Ok(total / (m as f64 * endmember_cols.ncols() as f64))
}

/// Embedding error of one mixture manifold, scoring `points` (dataset rows)
/// with coordinates taken from the matching columns of `y` (d x n).
pub fn mixture_embedding_error(ds: &SpectralDataset, mixture: usize, y: &DMatrix<f64>, points: &[usize]) -> Result<f64> {
    let ab = ds
        .abundances
        .as_ref()
        .ok_or_else(|| Error::input("dataset has no abundances"))?;
    let idx = ds
        .mixtures
        .get(mixture)
        .ok_or_else(|| Error::input(format!("mixture {mixture} is not defined")))?;
    if y.ncols() != ds.len() {
        return Err(Error::dim(format!("embedding has {} columns for {} rows", y.ncols(), ds.len())));
    }
    let rows: Vec<usize> = idx
        .iter()
        .map(|&e| {
            ds.endmember_row(e)
                .ok_or_else(|| Error::input(format!("endmember {e} has no pure row in the dataset")))
        })
        .collect::<Result<_>>()?;
    let v_y = y.select_columns(rows.iter());
    let y_pts = y.select_columns(points.iter());
    let true_w = DMatrix::from_fn(points.len(), idx.len(), |r, c| ab[(points[r], idx[c])]);
    embedding_error(&y_pts, &v_y, &true_w)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Runtimes {
    pub solve_s: f64,
    pub cluster_s: f64,
    pub embed_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub misclassification_pct: Option<f64>,
    /// Keyed by mixture index.
    pub per_manifold_embedding_error: BTreeMap<usize, f64>,
    /// Why a manifold has no embedding error.
    pub diagnostics: Vec<String>,
    pub unconverged_points: usize,
    pub isolated_points: usize,
    pub warnings: Vec<String>,
    /// Wall-clock times; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub runtimes: Runtimes,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn misclassification_examples() {
        assert_eq!(misclassification_rate(&[0, 1, 1, 2], &[0, 1, 1, 2]).unwrap(), 0.0);
        assert_eq!(misclassification_rate(&[1, 0, 0, 1], &[0, 1, 1, 0]).unwrap(), 0.0);
        assert_eq!(misclassification_rate(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 50.0);
        assert!(misclassification_rate(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let m = rng.random_range(n..7);
            let c = DMatrix::from_fn(n, m, |_, _| rng.random_range(0..10) as f64);
            let a = hungarian(&c).unwrap();
            let got: f64 = a.iter().enumerate().map(|(r, &j)| c[(r, j)]).sum();
            let best = (0..m)
                .permutations(n)
                .map(|p| p.iter().enumerate().map(|(r, &j)| c[(r, j)]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(got, best);
            assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), n);
        }
    }

    #[test]
    fn many_labels_use_assignment() {
        let truth: Vec<usize> = (0..80).map(|i| i % 8).collect();
        let pred: Vec<usize> = truth.iter().map(|t| (t * 3 + 1) % 8).collect();
        assert_eq!(misclassification_rate(&pred, &truth).unwrap(), 0.0);
        let mut off = pred.clone();
        off[0] = (off[0] + 1) % 8;
        assert_eq!(misclassification_rate(&off, &truth).unwrap(), 100.0 / 80.0);
    }

    fn triangle() -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    }

    /// Projected gradient with exact simplex projection.
    fn pg_oracle(v: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let n_e = v.ncols();
        let g = v.tr_mul(v);
        let step = 1.0 / g.norm();
        let mut w = DVector::from_element(n_e, 1.0 / n_e as f64);
        for _ in 0..200_000 {
            let grad = &g * &w - v.tr_mul(y);
            w = project_simplex(&(&w - grad * step));
        }
        w
    }

    fn project_simplex(z: &DVector<f64>) -> DVector<f64> {
        let mut s: Vec<f64> = z.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let mut cum = 0.0;
        let mut theta = 0.0;
        for (i, v) in s.iter().enumerate() {
            cum += v;
            let t = (cum - 1.0) / (i + 1) as f64;
            if v - t > 0.0 {
                theta = t;
            }
        }
        z.map(|v| (v - theta).max(0.0))
    }

    #[test]
    fn fcls_examples() {
        let v = triangle();
        let w = fcls(&v.columns(1, 1).into_owned(), &v).unwrap();
        assert_eq!(w.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
        let c = DMatrix::from_column_slice(2, 1, &[1.0 / 3.0, 1.0 / 3.0]);
        let w = fcls(&c, &v).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-8));
        // outside, closest to the hypotenuse
        let y = DVector::from_vec(vec![0.9, 0.6]);
        let w = fcls(&DMatrix::from_columns(&[y.clone()]), &v).unwrap();
        assert_eq!(w[(0, 0)], 0.0);
        let oracle = pg_oracle(&v, &y);
        assert!((w.row(0).transpose() - oracle).amax() < 1e-6);
        assert!(fcls(&c, &DMatrix::from_column_slice(2, 3, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0])).is_err());
    }

    #[test]
    fn fcls_kkt_residual_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let v = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let y = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let w = fcls(&DMatrix::from_columns(&[y.clone()]), &v).unwrap().row(0).transpose();
            let grad = v.tr_mul(&(&v * &w - &y));
            let support: Vec<usize> = (0..3).filter(|&i| w[i] > 1e-12).collect();
            let nu = -support.iter().map(|&i| grad[i]).sum::<f64>() / support.len() as f64;
            for i in 0..3 {
                let mult = grad[i] + nu;
                if support.contains(&i) {
                    assert!(mult.abs() < 1e-8);
                } else {
                    assert!(mult > -1e-8);
                }
            }
            let oracle = pg_oracle(&v, &y);
            let obj = |w: &DVector<f64>| (&v * w - &y).norm_squared();
            assert!(obj(&w) <= obj(&oracle) + 1e-10);
        }
    }

    #[test]
    fn affine_image_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = DMatrix::from_fn(50, 3, |_, _| rng.random_range(0.0..1.0f64));
        let w = DMatrix::from_fn(50, 3, |r, c| w[(r, c)] / w.row(r).sum());
        let v = DMatrix::from_column_slice(2, 3, &[0.3, -1.0, 2.0, 0.5, -0.7, 1.4]);
        let y = &v * w.transpose();
        assert!(embedding_error(&y, &v, &w).unwrap() < 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn misclassification_is_permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<usize> = (0..40).map(|_| rng.random_range(0..4)).collect();
            let truth: Vec<usize> = (0..40).map(|_| rng.random_range(0..3)).collect();
            let base = misclassification_rate(&pred, &truth).unwrap();
            let perm = [2usize, 0, 3, 1];
            let relabelled: Vec<usize> = pred.iter().map(|&l| perm[l]).collect();
            prop_assert_eq!(misclassification_rate(&relabelled, &truth).unwrap(), base);
            let t2: Vec<usize> = truth.iter().map(|&l| (l + 1) % 3).collect();
            prop_assert_eq!(misclassification_rate(&pred, &t2).unwrap(), base);
            prop_assert!((0.0..=100.0).contains(&base));
        }

        #[test]
        fn fcls_lands_on_the_simplex(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let y = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-3.0..3.0));
            if let Ok(w) = fcls(&y, &v) {
                for row in w.row_iter() {
                    prop_assert!(row.iter().all(|x| *x >= -1e-12));
                    prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn embedding_error_is_affine_invariant_inside_the_simplex(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
            let raw = DMatrix::from_fn(20, 3, |_, _| rng.random_range(0.0..1.0f64));
            let bary = DMatrix::from_fn(20, 3, |r, c| raw[(r, c)] / raw.row(r).sum());
            let y = &v * bary.transpose();
            let w = DMatrix::from_fn(20, 3, |r, c| if c == r % 3 { 1.0 } else { 0.0 });
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(2, 2) * 2.0;
            let b = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let move_pts = |m: &DMatrix<f64>| {
                let mut out = &a * m;
                for mut c in out.column_iter_mut() { c += &b; }
                out
            };
            if let (Ok(e1), Ok(e2)) = (embedding_error(&y, &v, &w), embedding_error(&move_pts(&y), &move_pts(&v), &w)) {
                prop_assert!((e1 - e2).abs() < 1e-8);
            }
        }

        #[test]
        fn embedding_error_is_similarity_invariant(seed in 0u64..10_000, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let y = DMatrix::from_fn(3, 20, |_, _| rng.random_range(-1.0..1.0));
            let w = DMatrix::from_fn(20, 3, |r, c| if c == r % 3 { 1.0 } else { 0.0 });
            let q = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)).qr().q() * scale;
            let b = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let move_pts = |m: &DMatrix<f64>| {
                let mut out = &q * m;
                for mut c in out.column_iter_mut() { c += &b; }
                out
            };
            if let (Ok(e1), Ok(e2)) = (embedding_error(&y, &v, &w), embedding_error(&move_pts(&y), &move_pts(&v), &w)) {
                prop_assert!((e1 - e2).abs() < 1e-8);
            }
        }
    }
}
