//! Brute-force reference solver for tiny neighborhoods.

use nalgebra::{DMatrix, DVector};

use super::objective;
use crate::error::{Error, Result};

const SEARCH_RADIUS: f64 = 3.0;
const REFINE_POINTS: i64 = 8;
const FINAL_STEP: f64 = 1e-10;

/// Minimizes the reconstruction objective over the affine hyperplane for
/// k in {2, 3} by a coarse grid on `[-3, 3]^(k-1)` followed by a zooming
/// local grid.
///
/// The last coordinate is eliminated as `a_k = 1 - sum(others)`.
pub fn oracle_solve_small(
    x: &DVector<f64>,
    n: &DMatrix<f64>,
    n_hat: &DMatrix<f64>,
    lambda: f64,
    grid_step: f64,
) -> Result<DVector<f64>> {
    let k = n.ncols();
    if !(2..=3).contains(&k) {
        return Err(Error::input(format!("oracle handles k in {{2, 3}}, got {k}")));
    }
    if !(grid_step > 0.0 && grid_step < SEARCH_RADIUS) {
        return Err(Error::input(format!("grid_step: must be in (0, 3), got {grid_step}")));
    }
    let free = k - 1;
    let eval = |t: &[f64]| {
        let mut a = DVector::zeros(k);
        let mut rest = 1.0;
        for (i, v) in t.iter().enumerate() {
            a[i] = *v;
            rest -= v;
        }
        a[k - 1] = rest;
        (objective(x, n, n_hat, &a, lambda), a)
    };

    let steps = (2.0 * SEARCH_RADIUS / grid_step).round() as i64;
    let mut best = (f64::INFINITY, vec![0.0; free]);
    let consider = |t: Vec<f64>, best: &mut (f64, Vec<f64>)| {
        let (f, _) = eval(&t);
        if f < best.0 {
            *best = (f, t);
        }
    };
    for_grid(free, steps, |idx| {
        let t = idx.iter().map(|&i| -SEARCH_RADIUS + i as f64 * grid_step).collect();
        consider(t, &mut best);
    });

    // local pattern search; recenters without shrinking while the best point
    // sits on the border of the local grid
    let mut half = grid_step;
    while half > FINAL_STEP {
        let centre = best.1.clone();
        let spacing = half / REFINE_POINTS as f64;
        let mut local = best.clone();
        for_grid(free, 2 * REFINE_POINTS, |idx| {
            let t = idx
                .iter()
                .zip(&centre)
                .map(|(&i, c)| c + (i - REFINE_POINTS) as f64 * spacing)
                .collect();
            consider(t, &mut local);
        });
        let on_border = local
            .1
            .iter()
            .zip(&centre)
            .any(|(t, c)| ((t - c) / spacing).abs().round() as i64 == REFINE_POINTS);
        best = local;
        if !on_border {
            half /= 4.0;
        }
    }
    Ok(eval(&best.1).1)
}

fn for_grid(dims: usize, steps: i64, mut f: impl FnMut(&[i64])) {
    let mut idx = vec![0i64; dims];
    loop {
        f(&idx);
        let mut d = 0;
        loop {
            if d == dims {
                return;
            }
            idx[d] += 1;
            if idx[d] <= steps {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}
