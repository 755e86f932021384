//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `LRNE_ACCEPTANCE_STRICT=1` turns any FAIL into a nonzero exit status.
//! `LRNE_ACCEPTANCE_FULL_GRID=1` searches all 54 (k, lambda) cells for the
//! clustering criterion instead of the k = 35 row.
//! `LRNE_ACCEPTANCE_ONLY=name,name` runs a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use lrne::admm::{
    augmented_lagrangian, nuclear_norm, objective, oracle_solve_small, solve_reconstruction, svt, update_alpha,
    AdmmState, SolverOptions,
};
use lrne::dataset::SpectralDataset;
use lrne::eval::misclassification_rate;
use lrne::hapke::{generate_mixture_dataset, synthetic_endmembers, MixtureConfig};
use lrne::neighborhood::{knn, normalize_neighborhood, row_distance, NeighborhoodProblem};
use lrne::pipeline::{lle_baseline_error, run_pipeline, run_sweep, PipelineOptions, SweepTable, DEFAULT_K_GRID, DEFAULT_LAMBDA_GRID};
use lrne::theory::{norm_suite, own_subspace_mass, trace_lasso_norm};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = fn() -> (bool, String);

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn gaussian_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    gaussian_mat(rng, n, n).qr().q()
}

fn admm_vs_oracle() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = f64::NEG_INFINITY;
    let mut solves = 0;
    for _ in 0..50 {
        let n = rand_mat(&mut rng, 5, 3);
        let x = rand_mat(&mut rng, 5, 1).column(0).into_owned();
        let p = NeighborhoodProblem::new(0, x, vec![1, 2, 3], n).unwrap();
        for lambda in [0.01, 0.1, 1.0] {
            let got = solve_reconstruction(&p, &SolverOptions::with_lambda(lambda)).unwrap();
            let want = oracle_solve_small(&p.x, &p.n, &p.n_hat, lambda, 0.1).unwrap();
            let f_got = objective(&p.x, &p.n, &p.n_hat, &got.alpha, lambda);
            let f_want = objective(&p.x, &p.n, &p.n_hat, &want, lambda);
            worst = worst.max((f_got - f_want) / f_want.abs().max(f64::MIN_POSITIVE));
            solves += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-4 && secs < 30.0,
        format!("{solves} solves, worst relative excess {worst:.2e} (<= 1e-4), {secs:.1}s (< 30s)"),
    )
}

fn stationarity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (d, k) = (rng.random_range(3..8), rng.random_range(2..6));
        let n = rand_mat(&mut rng, d, k);
        let (n_hat, _) = normalize_neighborhood(&n);
        let x = rand_mat(&mut rng, d, 1).column(0).into_owned();
        let beta = rng.random_range(0.5..2.0);
        let lambda = rng.random_range(0.0..1.0);
        let state = AdmmState {
            v: rand_mat(&mut rng, d, k),
            alpha: rand_mat(&mut rng, k, 1).column(0).into_owned(),
            lambda1: rng.random_range(-1.0..1.0),
            lambda2: rand_mat(&mut rng, d, k),
            beta,
            iter: 0,
        };
        let a = update_alpha(&state, &x, &n, &n_hat, beta).unwrap();
        let h = 1e-6;
        let g = DVector::from_fn(k, |i, _| {
            let (mut p, mut m) = (a.clone(), a.clone());
            p[i] += h;
            m[i] -= h;
            (augmented_lagrangian(&state, &p, &x, &n, &n_hat, lambda)
                - augmented_lagrangian(&state, &m, &x, &n, &n_hat, lambda))
                / (2.0 * h)
        });
        worst = worst.max(g.norm());
    }
    (worst < 1e-6, format!("100 states, max finite-difference gradient norm {worst:.2e} (< 1e-6)"))
}

fn svt_correctness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut beaten = 0;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(2..7), rng.random_range(2..7));
        let m = gaussian_mat(&mut rng, r, c);
        let tau = rng.random_range(0.05..1.5);
        let prox = |v: &DMatrix<f64>| 0.5 * (v - &m).norm_squared() + tau * nuclear_norm(v);
        let v = svt(&m, tau);
        let base = prox(&v);
        for _ in 0..200 {
            let e = gaussian_mat(&mut rng, r, c);
            let e = e.scale(1e-3 / e.norm());
            if prox(&(&v + e)) < base {
                beaten += 1;
            }
        }
    }
    let mut worst_diag: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..7);
        let d: DVector<f64> = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let tau = rng.random_range(0.0..2.0);
        let want = DMatrix::from_diagonal(&d.map(|v: f64| v.signum() * (v.abs() - tau).max(0.0)));
        worst_diag = worst_diag.max((svt(&DMatrix::from_diagonal(&d), tau) - want).amax());
    }
    (
        beaten == 0 && worst_diag <= 1e-12,
        format!("{beaten} of 20000 perturbations improved the prox objective (0 allowed); diagonal max error {worst_diag:.1e} (<= 1e-12)"),
    )
}

fn trace_lasso_endpoints() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (mut worst_l1, mut worst_l2): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let n = rng.random_range(1..8);
        let rows = n + rng.random_range(0..4);
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = gaussian_mat(&mut rng, rows, n).qr().q();
        worst_l1 = worst_l1.max((trace_lasso_norm(&q, &z).unwrap() - z.abs().sum()).abs());
        let u = gaussian_mat(&mut rng, rows, 1).normalize();
        let same = DMatrix::from_fn(rows, n, |i, _| u[i]);
        worst_l2 = worst_l2.max((trace_lasso_norm(&same, &z).unwrap() - z.norm()).abs());
    }
    (
        worst_l1 <= 1e-10 && worst_l2 <= 1e-10,
        format!("100 z: orthonormal error {worst_l1:.1e}, identical-column error {worst_l2:.1e} (<= 1e-10)"),
    )
}

fn norm_propositions() -> (bool, String) {
    let report = norm_suite(1000, 8, 105);
    (
        report.violations == 0 && report.trials == 1000,
        format!(
            "{} pairs, {} violations, min slack {:.2e}",
            report.trials,
            report.violations,
            report.min_slack.unwrap_or(f64::NAN)
        ),
    )
}

fn two_ternary() -> &'static SpectralDataset {
    static DS: OnceLock<SpectralDataset> = OnceLock::new();
    DS.get_or_init(|| {
        let em = synthetic_endmembers(100, 4, 1).unwrap();
        generate_mixture_dataset(&em, &MixtureConfig::two_ternary(1003, 0)).unwrap()
    })
}

struct SweepRun {
    table: SweepTable,
    row_secs: f64,
    cells_searched: usize,
}

fn clustering_sweep() -> &'static SweepRun {
    static RUN: OnceLock<SweepRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let ds = two_ternary();
        let base = PipelineOptions::default();
        let start = Instant::now();
        let row = run_sweep(ds, &[35], &DEFAULT_LAMBDA_GRID, &base);
        let row_secs = start.elapsed().as_secs_f64();
        if std::env::var("LRNE_ACCEPTANCE_FULL_GRID").is_ok_and(|v| v == "1") {
            let others: Vec<usize> = DEFAULT_K_GRID.iter().copied().filter(|&k| k != 35).collect();
            let rest = run_sweep(ds, &others, &DEFAULT_LAMBDA_GRID, &base);
            let mut cells = row.cells.clone();
            cells.extend(rest.cells);
            let n = cells.len();
            SweepRun {
                table: SweepTable {
                    k_grid: DEFAULT_K_GRID.to_vec(),
                    lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
                    cells,
                },
                row_secs,
                cells_searched: n,
            }
        } else {
            SweepRun {
                cells_searched: row.cells.len(),
                table: row,
                row_secs,
            }
        }
    })
}

fn pct(table: &SweepTable, k: usize, lambda: f64) -> f64 {
    table
        .cell(k, lambda)
        .and_then(|c| c.report.as_ref())
        .and_then(|r| r.misclassification_pct)
        .unwrap_or(f64::NAN)
}

fn clustering() -> (bool, String) {
    let run = clustering_sweep();
    let table = &run.table;
    let best = table
        .cells
        .iter()
        .filter_map(|c| c.report.as_ref().and_then(|r| r.misclassification_pct).map(|m| (m, c.k, c.lambda)))
        .fold((f64::INFINITY, 0, 0.0), |a, b| if b.0 < a.0 { b } else { a });

    let row: Vec<f64> = DEFAULT_LAMBDA_GRID.iter().map(|&l| pct(table, 35, l)).collect();
    let (argmin, min) = row
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |a, (i, &v)| if v < a.1 { (i, v) } else { a });
    // failure (near chance) at the two smallest lambdas, minimum at 0.01 or
    // 0.05, then non-decreasing up to lambda = 10 within one point
    let fails_small = row[0] >= 40.0 && row[1] >= 40.0;
    let min_near = (2..=3).contains(&argmin);
    let degrades = row[argmin..].windows(2).all(|w| w[1] >= w[0] - 1.0) && row[8] > min + 1.0;
    let trend = fails_small && min_near && degrades;

    let pass = best.0 <= 5.0 && trend && run.row_secs < 600.0;
    let row_text: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
    (
        pass,
        format!(
            "best {:.2}% at k={} lambda={} over {} cells (<= 5%); k=35 row [{}]; trend: small-lambda failure {}, minimum at 0.01/0.05 {}, degradation {}; k=35 row took {:.0}s (< 600s)",
            best.0,
            best.1,
            best.2,
            run.cells_searched,
            row_text.join(", "),
            fails_small,
            min_near,
            degrades,
            run.row_secs
        ),
    )
}

fn embedding_quality() -> (bool, String) {
    let run = clustering_sweep();
    let ds = two_ternary();
    let mut best: BTreeMap<usize, (f64, usize, f64)> = BTreeMap::new();
    for cell in &run.table.cells {
        if let Some(r) = &cell.report {
            for (&m, &e) in &r.per_manifold_embedding_error {
                let entry = best.entry(m).or_insert((f64::INFINITY, 0, 0.0));
                if e < entry.0 {
                    *entry = (e, cell.k, cell.lambda);
                }
            }
        }
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for m in 0..ds.mixtures.len() {
        let lle = lle_baseline_error(ds, m, 35, lrne::embed::DEFAULT_LLE_REG).unwrap();
        match best.get(&m) {
            Some(&(e, k, l)) => {
                let ok = e <= 2.0 * lle;
                pass &= ok;
                parts.push(format!("mixture {m}: LRNE {e:.4} (k={k} lambda={l}) vs LLE {lle:.4}, ratio {:.2}", e / lle));
            }
            None => {
                pass = false;
                parts.push(format!("mixture {m}: no LRNE embedding error in any cell (endmember misassigned), LLE {lle:.4}"));
            }
        }
    }
    (pass, format!("{} (ratio <= 2)", parts.join("; ")))
}

fn manifold_selection() -> (bool, String) {
    let mut per_lambda: Vec<Vec<f64>> = vec![Vec::new(); DEFAULT_LAMBDA_GRID.len()];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let q = orthogonal(&mut rng, 5);
        let (line, a) = (q.column(0).into_owned(), q.column(1).into_owned());
        let b = (q.column(1) * 0.5 + q.column(2) * (3f64.sqrt() / 2.0)).into_owned();
        let origin = gaussian_mat(&mut rng, 5, 1).column(0).into_owned();
        let target = &origin + &a * 0.05;
        let patch = |dir: &DVector<f64>, rng: &mut ChaCha8Rng| {
            DMatrix::from_columns(
                &(0..10)
                    .map(|_| &origin + &line * rng.random_range(-0.3..0.3) + dir * rng.random_range(0.0..0.3))
                    .collect::<Vec<_>>(),
            )
        };
        let own = patch(&a, &mut rng);
        let other = patch(&b, &mut rng);
        for (i, &lambda) in DEFAULT_LAMBDA_GRID.iter().enumerate() {
            per_lambda[i].push(1.0 - own_subspace_mass(&own, &other, &target, lambda).unwrap());
        }
    }
    let means: Vec<f64> = per_lambda.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let (i, best) = means
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |a, (i, &v)| if v < a.1 { (i, v) } else { a });
    let worst = per_lambda[i].iter().cloned().fold(0.0, f64::max);
    (
        best < 0.05,
        format!(
            "20 instances, best lambda {}: mean wrong-patch mass {:.2}% (< 5%), worst instance {:.2}%",
            DEFAULT_LAMBDA_GRID[i],
            100.0 * best,
            100.0 * worst
        ),
    )
}

fn invariance() -> (bool, String) {
    let em = synthetic_endmembers(20, 4, 3).unwrap();
    let ds = generate_mixture_dataset(&em, &MixtureConfig::two_ternary(60, 4)).unwrap();
    // the property concerns converged coefficients
    let opts = PipelineOptions {
        k: 10,
        solver: SolverOptions {
            max_iters: 3_000,
            tol_primal: 1e-9,
            tol_alpha: 1e-11,
            ..SolverOptions::default()
        },
        ..Default::default()
    };
    let base = run_pipeline(&ds, &opts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let q = orthogonal(&mut rng, ds.bands());
    let shift = gaussian_mat(&mut rng, 1, ds.bands());
    let variants = [
        ("translation", ds.map_spectra(|x| DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] + shift[j]))),
        ("rotation", ds.map_spectra(|x| x * &q)),
    ];
    let (mut r_diff, mut err_diff, mut label_pct): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut unconverged = base.metrics.unconverged_points;
    for (_, v) in &variants {
        let out = run_pipeline(v, &opts).unwrap();
        unconverged += out.metrics.unconverged_points;
        r_diff = r_diff.max((out.reconstruction.r.to_dense() - base.reconstruction.r.to_dense()).amax());
        label_pct = label_pct.max(misclassification_rate(&out.clustering.labels, &base.clustering.labels).unwrap());
        for (m, e) in &base.metrics.per_manifold_embedding_error {
            let other = out.metrics.per_manifold_embedding_error.get(m).copied().unwrap_or(f64::NAN);
            err_diff = err_diff.max((other - e).abs());
        }
        if out.metrics.per_manifold_embedding_error.len() != base.metrics.per_manifold_embedding_error.len() {
            err_diff = f64::NAN;
        }
    }

    let tight = SolverOptions {
        max_iters: 200_000,
        tol_primal: 1e-11,
        tol_alpha: 1e-13,
        ..SolverOptions::default()
    };
    let mut scale_diff: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = rand_mat(&mut rng, 10, 6);
        let x = rand_mat(&mut rng, 10, 1).column(0).into_owned();
        let lambda = rng.random_range(0.01..1.0);
        let p = NeighborhoodProblem::new(0, x.clone(), (1..=6).collect(), n.clone()).unwrap();
        let a = solve_reconstruction(&p, &SolverOptions { lambda, ..tight }).unwrap();
        for c in [0.5, 3.0] {
            let ps = NeighborhoodProblem::new(0, &x * c, (1..=6).collect(), &n * c).unwrap();
            let b = solve_reconstruction(&ps, &SolverOptions { lambda: c * c * lambda, ..tight }).unwrap();
            unconverged += (!a.converged) as usize + (!b.converged) as usize;
            scale_diff = scale_diff.max((&a.alpha - &b.alpha).amax());
        }
    }

    let pass = r_diff <= 1e-6 && label_pct == 0.0 && err_diff <= 1e-6 && scale_diff <= 1e-6;
    (
        pass,
        format!(
            "translation+rotation: max |dR| {r_diff:.1e} (<= 1e-6), label disagreement {label_pct}% (exact), max embedding-error change {err_diff:.1e} (<= 1e-6); lambda -> c^2 lambda: max |d alpha| {scale_diff:.1e} (<= 1e-6), {unconverged} points/solves stopped at the iteration cap before the 1e-9 tolerance"
        ),
    )
}

fn density_gradient() -> (bool, String) {
    let em = synthetic_endmembers(100, 4, 1).unwrap();
    let (dark, bright) = (em.darkest(), em.brightest());
    let cfg = MixtureConfig {
        endmember_indices: vec![vec![dark, 1, bright]],
        ..MixtureConfig::two_ternary(1003, 0)
    };
    let ds = generate_mixture_dataset(&em, &cfg).unwrap();
    let ab = ds.abundances.as_ref().unwrap();
    let nn = knn(&ds.x, 10).unwrap();
    let tenth = |i: usize| row_distance(&ds.x, i, nn[i][9]);
    let near = |e: usize| -> Vec<f64> { (0..ds.len()).filter(|&i| ab[(i, e)] >= 0.8).map(tenth).collect() };
    let (d, b) = (near(dark), near(bright));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut diffs: Vec<f64> = (0..10_000)
        .map(|_| {
            let sd: f64 = (0..d.len()).map(|_| d[rng.random_range(0..d.len())]).sum::<f64>() / d.len() as f64;
            let sb: f64 = (0..b.len()).map(|_| b[rng.random_range(0..b.len())]).sum::<f64>() / b.len() as f64;
            sd - sb
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    let upper = diffs[(0.99 * diffs.len() as f64) as usize];
    (
        upper < 0.0,
        format!(
            "mean 10-NN distance near darkest {:.4} ({} pts) vs brightest {:.4} ({} pts); 99% bootstrap upper bound of difference {upper:.4} (< 0)",
            mean(&d),
            d.len(),
            mean(&b),
            b.len()
        ),
    )
}

fn run_cli(args: &[&str], dir: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_lrne"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn cli_determinism() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("config.toml"),
        "seed = 5\n[simulation]\nbands = 20\nsamples_per_mixture = 60\n[pipeline]\nk = 10\nmax_iters = 80\n\
         [sweep]\nk_grid = [8, 10]\nlambda_grid = [0.01, 1.0]\n[theory]\ntrials = 100\nipd_trials = 5\n",
    )
    .unwrap();
    let runs: [(&str, Vec<&str>); 8] = [
        ("simulate", vec!["simulate"]),
        ("pipeline", vec!["pipeline"]),
        ("pipeline-file", vec!["pipeline", "--dataset", "sim-a/dataset.csv"]),
        ("sweep", vec!["sweep"]),
        ("theory", vec!["theory"]),
        ("embed", vec!["embed"]),
        ("embed-lle", vec!["embed", "--method", "lle"]),
        (
            "evaluate",
            vec!["evaluate", "--labels", "pipeline-a/labels.csv", "--embedding", "pipeline-a/embedding.csv"],
        ),
    ];
    let mut differing = Vec::new();
    let mut failed = Vec::new();
    for (name, args) in &runs {
        let stem = name.strip_suffix("-file").map_or(name.to_string(), |_| name.to_string());
        let stem = if *name == "simulate" { "sim".to_string() } else { stem };
        for side in ["a", "b"] {
            let out = format!("{stem}-{side}");
            let mut full = vec!["--config", "config.toml", "--out", out.as_str()];
            full.extend(args.iter());
            if !run_cli(&full, dir) {
                failed.push(format!("{name}-{side}"));
            }
        }
        if dir_contents(&dir.join(format!("{stem}-a"))) != dir_contents(&dir.join(format!("{stem}-b"))) {
            differing.push(name.to_string());
        }
    }
    (
        failed.is_empty() && differing.is_empty(),
        format!(
            "{} commands run twice; failed runs {:?}; differing outputs {:?}",
            runs.len(),
            failed,
            differing
        ),
    )
}

fn main() {
    let strict = std::env::var("LRNE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let checks: [(&str, Check); 11] = [
        ("admm-vs-oracle", admm_vs_oracle),
        ("stationarity", stationarity),
        ("svt-correctness", svt_correctness),
        ("trace-lasso-endpoints", trace_lasso_endpoints),
        ("norm-propositions", norm_propositions),
        ("clustering", clustering),
        ("embedding-quality", embedding_quality),
        ("manifold-selection", manifold_selection),
        ("invariance", invariance),
        ("density-gradient", density_gradient),
        ("cli-determinism", cli_determinism),
    ];
    let only: Option<Vec<String>> =
        std::env::var("LRNE_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let mut failures = 0;
    let mut ran = 0;
    for (name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (pass, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        failures += (!pass) as usize;
        println!(
            "ACCEPTANCE {:<22} {}  [{:.1}s] {detail}",
            name,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("ACCEPTANCE summary: {} of {} criteria pass", ran - failures, ran);
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
