use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use lrne::admm::solve_all;
use lrne::affinity::assemble_reconstruction_matrix;
use lrne::dataset::SpectralDataset;
use lrne::embed::{embed as embed_points, lle_reconstruction};
use lrne::eval::{misclassification_rate, MetricsReport};
use lrne::hapke::generate_mixture_dataset;
use lrne::neighborhood::build_problems;
use lrne::pipeline::{run_pipeline, run_sweep, score};
use lrne::theory::{ipd_suite, norm_suite, IpdSuiteReport, NormSuiteReport};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{Config, EmbedMethod};
use crate::CliError;

pub struct OutputDir(PathBuf);

impl OutputDir {
    /// Creates a fresh directory; an existing non-empty one is refused.
    pub fn create(requested: Option<&Path>, command: &str) -> Result<Self, CliError> {
        let path = match requested {
            Some(p) => {
                if p.is_file() {
                    return Err(CliError::Input(format!("output.dir: {} is a file", p.display())));
                }
                if p.is_dir() && fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(true) {
                    return Err(CliError::Input(format!(
                        "output.dir: {} already exists and is not empty",
                        p.display()
                    )));
                }
                p.to_path_buf()
            }
            None => {
                let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
                let base = PathBuf::from("runs").join(format!("{command}-{secs}"));
                let mut path = base.clone();
                let mut n = 1;
                while path.exists() {
                    n += 1;
                    path = PathBuf::from(format!("{}-{n}", base.display()));
                }
                path
            }
        };
        fs::create_dir_all(&path)
            .map_err(|e| CliError::Input(format!("output.dir: cannot create {}: {e}", path.display())))?;
        Ok(OutputDir(path))
    }

    pub fn path(&self) -> &Path {
        &self.0
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display())))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        self.write(name, text + "\n")
    }

    /// Flags whatever was written as incomplete.
    pub fn mark_stale(&self, err: &CliError) {
        let _ = fs::write(self.file("STALE"), format!("{err}\n"));
    }
}

fn simulate_dataset(config: &Config) -> Result<SpectralDataset, CliError> {
    let em = config.endmember_set()?;
    Ok(generate_mixture_dataset(&em, &config.mixture_config())?)
}

fn load_dataset(config: &Config) -> Result<SpectralDataset, CliError> {
    match &config.dataset.path {
        Some(p) => {
            let ds = SpectralDataset::read(p)
                .map_err(|e| CliError::Input(format!("dataset.path: {e}")))?;
            ds.validate().map_err(|e| CliError::Input(format!("dataset.path: {e}")))?;
            Ok(ds)
        }
        None => simulate_dataset(config),
    }
}

/// Resolved config without the output location, so reruns compare equal.
fn write_config(config: &Config, out: &OutputDir) -> Result<(), CliError> {
    let mut c = config.clone();
    c.output.dir = None;
    let text = toml::to_string(&c).map_err(|e| CliError::Input(e.to_string()))?;
    out.write("config.toml", text)
}

fn write_labels(out: &OutputDir, labels: &[usize]) -> Result<(), CliError> {
    let mut s = String::from("point,label\n");
    for (i, l) in labels.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    out.write("labels.csv", s)
}

pub fn simulate(config: &Config, out: &OutputDir) -> Result<(), CliError> {
    write_config(config, out)?;
    let ds = simulate_dataset(config)?;
    ds.write(&out.file("dataset.csv"))?;
    info!("simulated {} spectra with {} bands", ds.len(), ds.bands());
    Ok(())
}

pub fn pipeline(config: &Config, out: &OutputDir) -> Result<(), CliError> {
    write_config(config, out)?;
    let ds = load_dataset(config)?;
    let result = run_pipeline(&ds, &config.pipeline_options())?;
    write_labels(out, &result.clustering.labels)?;
    result
        .embedding
        .write_csv(&out.file("embedding.csv"), Some(&result.clustering.labels))?;
    out.write_json("metrics.json", &result.metrics)?;
    if let Some(m) = result.metrics.misclassification_pct {
        println!("misclassification {m:.2}%");
    }
    for (m, e) in &result.metrics.per_manifold_embedding_error {
        println!("embedding error, mixture {m}: {e:.4}");
    }
    for d in &result.metrics.diagnostics {
        println!("{d}");
    }
    Ok(())
}

pub fn sweep(config: &Config, out: &OutputDir) -> Result<(), CliError> {
    write_config(config, out)?;
    let ds = load_dataset(config)?;
    let base = config.pipeline_options();
    base.solver.validate()?;
    base.clusters_for(&ds)?;
    base.embed_dim_for(&ds)?;
    let table = run_sweep(&ds, &config.sweep.k_grid, &config.sweep.lambda_grid, &base);
    let text = table.to_text();
    out.write("sweep.txt", &text)?;
    out.write("sweep.csv", table.to_csv()?)?;
    out.write("sweep_plot.csv", table.to_plot_csv()?)?;
    out.write_json("sweep.json", &table)?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct TheoryReport {
    seed: u64,
    norms: NormSuiteReport,
    dominance: IpdSuiteReport,
}

pub fn theory(config: &Config, out: &OutputDir) -> Result<(), CliError> {
    write_config(config, out)?;
    let t = &config.theory;
    let norms = norm_suite(t.trials, t.max_n, config.seed);
    let dominance = ipd_suite(t.ipd_trials, t.ipd_lambda, config.seed)?;
    let summary = format!(
        "norm inequalities: {} trials, {} violations, min slack {}\n\
         dominance condition: {} trials, held in {}, {} with own-subspace mass <= 0.95\n",
        norms.trials,
        norms.violations,
        norms.min_slack.map_or("n/a".to_string(), |s| format!("{s:e}")),
        dominance.trials,
        dominance.condition_held,
        dominance.counterexamples,
    );
    let violations = norms.violations;
    out.write_json(
        "theory.json",
        &TheoryReport {
            seed: config.seed,
            norms,
            dominance,
        },
    )?;
    out.write("theory.txt", &summary)?;
    print!("{summary}");
    if violations > 0 {
        return Err(CliError::Numerical(format!("{violations} norm-inequality violations")));
    }
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingSummary {
    method: EmbedMethod,
    d: usize,
    eigvals: Vec<f64>,
    next_eigval: Option<f64>,
    warning: Option<String>,
    unconverged_points: usize,
}

pub fn embed(config: &Config, out: &OutputDir) -> Result<(), CliError> {
    write_config(config, out)?;
    let ds = load_dataset(config)?;
    let opts = config.pipeline_options();
    let d = opts.embed_dim_for(&ds)?;
    if opts.k >= ds.len() {
        return Err(CliError::Input(format!("pipeline.k: must be below the {} points", ds.len())));
    }
    let r = match config.embed.method {
        EmbedMethod::Lrne => {
            let problems = build_problems(&ds.x, opts.k)?;
            assemble_reconstruction_matrix(&solve_all(&problems, &opts.solver)?, ds.len())?
        }
        EmbedMethod::Lle => lle_reconstruction(&ds.x, opts.k, config.embed.lle_reg)?,
    };
    let e = embed_points(&r.r, d)?;
    e.write_csv(&out.file("embedding.csv"), ds.labels.as_deref())?;
    out.write_json(
        "embedding.json",
        &EmbeddingSummary {
            method: config.embed.method,
            d,
            eigvals: e.eigvals.clone(),
            next_eigval: e.next_eigval,
            warning: e.warning.clone(),
            unconverged_points: r.unconverged_count(),
        },
    )?;
    Ok(())
}

fn read_table(path: &Path, what: &str) -> Result<Vec<Vec<String>>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{what}: {}: {e}", path.display())))?;
    r.records()
        .map(|rec| {
            rec.map(|r| r.iter().map(str::to_string).collect())
                .map_err(|e| CliError::Input(format!("{what}: {}: {e}", path.display())))
        })
        .collect()
}

/// Rows keyed by their `point` column, which must cover `0..n` once.
fn rows_by_point(rows: Vec<Vec<String>>, n: usize, what: &str) -> Result<Vec<Vec<String>>, CliError> {
    if rows.len() != n {
        return Err(CliError::Input(format!("{what}: {} rows for {n} points", rows.len())));
    }
    let mut slots: Vec<Option<Vec<String>>> = vec![None; n];
    for row in rows {
        let i: usize = row
            .first()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| CliError::Input(format!("{what}: bad point index in row {row:?}")))?;
        if i >= n || slots[i].is_some() {
            return Err(CliError::Input(format!("{what}: point {i} is out of range or repeated")));
        }
        slots[i] = Some(row);
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}

pub fn evaluate(config: &Config, out: &OutputDir, labels: &Path, embedding: Option<&Path>) -> Result<(), CliError> {
    write_config(config, out)?;
    let ds = load_dataset(config)?;
    let n = ds.len();
    let pred: Vec<usize> = rows_by_point(read_table(labels, "labels")?, n, "labels")?
        .iter()
        .map(|r| {
            r.get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| CliError::Input(format!("labels: bad label in row {r:?}")))
        })
        .collect::<Result<_, _>>()?;
    let opts = config.pipeline_options();
    let mut metrics = MetricsReport {
        k: opts.k,
        lambda: opts.solver.lambda,
        beta: opts.solver.beta,
        seed: opts.seed,
        misclassification_pct: None,
        per_manifold_embedding_error: Default::default(),
        diagnostics: Vec::new(),
        unconverged_points: 0,
        isolated_points: 0,
        warnings: Vec::new(),
        runtimes: Default::default(),
    };
    match embedding {
        Some(path) => {
            let rows = rows_by_point(read_table(path, "embedding")?, n, "embedding")?;
            let d = rows.first().map_or(0, |r| r.len().saturating_sub(2));
            if d == 0 {
                return Err(CliError::Input("embedding: no coordinate columns".into()));
            }
            let mut y = DMatrix::zeros(d, n);
            for (i, r) in rows.iter().enumerate() {
                if r.len() != d + 2 {
                    return Err(CliError::Input(format!("embedding: row {i} has {} columns, expected {}", r.len(), d + 2)));
                }
                for c in 0..d {
                    y[(c, i)] = r[c + 2]
                        .trim()
                        .parse()
                        .map_err(|_| CliError::Input(format!("embedding: bad coordinate in row {i}")))?;
                }
            }
            score(&ds, &pred, &y, &mut metrics)?;
        }
        None => {
            if let Some(truth) = &ds.labels {
                metrics.misclassification_pct = Some(misclassification_rate(&pred, truth)?);
            }
        }
    }
    out.write_json("metrics.json", &metrics)?;
    Ok(())
}
