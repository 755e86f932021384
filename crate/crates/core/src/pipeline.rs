//! End-to-end composition of the stages and parameter sweeps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::admm::{solve_all, SolverOptions};
use crate::affinity::{
    assemble_reconstruction_matrix, similarity_weights, symmetrize, ReconstructionMatrix, SimilarityDiagnostics,
};
use crate::cluster::{spectral_cluster, ClusterResult};
use crate::dataset::SpectralDataset;
use crate::embed::{embed, lle_reconstruction, EmbeddingResult};
use crate::error::{Error, Result};
use crate::eval::{match_labels, misclassification_rate, mixture_embedding_error, MetricsReport, Runtimes};
use crate::neighborhood::{build_problems, NeighborhoodProblem};
use crate::sparse::SparseMatrix;

/// Neighborhood sizes of the standard sweep.
pub const DEFAULT_K_GRID: [usize; 6] = [25, 30, 35, 40, 45, 50];
/// Penalty weights of the standard sweep.
pub const DEFAULT_LAMBDA_GRID: [f64; 9] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub k: usize,
    pub solver: SolverOptions,
    /// Cluster count; defaults to the number of mixtures in the dataset.
    pub clusters: Option<usize>,
    /// Embedding dimension; defaults to the number of distinct endmembers minus one.
    pub embed_dim: Option<usize>,
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            k: 35,
            solver: SolverOptions::default(),
            clusters: None,
            embed_dim: None,
            seed: 0,
        }
    }
}

impl PipelineOptions {
    pub fn clusters_for(&self, ds: &SpectralDataset) -> Result<usize> {
        match self.clusters {
            Some(0) => Err(Error::input("clusters: must be at least 1")),
            Some(p) => Ok(p),
            None if !ds.mixtures.is_empty() => Ok(ds.mixtures.len()),
            None => Err(Error::input("clusters: required when the dataset has no mixture metadata")),
        }
    }

    pub fn embed_dim_for(&self, ds: &SpectralDataset) -> Result<usize> {
        match self.embed_dim {
            Some(0) => Err(Error::input("embed_dim: must be at least 1")),
            Some(d) => Ok(d),
            None => {
                let distinct: BTreeSet<usize> = ds.mixtures.iter().flatten().copied().collect();
                if distinct.len() < 2 {
                    Err(Error::input("embed_dim: required when the dataset has no endmember metadata"))
                } else {
                    Ok(distinct.len() - 1)
                }
            }
        }
    }

    pub fn validate(&self, ds: &SpectralDataset) -> Result<()> {
        self.solver.validate()?;
        if self.k < 2 || self.k >= ds.len() {
            return Err(Error::input(format!("k: must satisfy 2 <= k < n = {}, got {}", ds.len(), self.k)));
        }
        let p = self.clusters_for(ds)?;
        if p > ds.len() {
            return Err(Error::input(format!("clusters: {p} exceeds the {} points", ds.len())));
        }
        let d = self.embed_dim_for(ds)?;
        if d >= ds.len() {
            return Err(Error::input(format!("embed_dim: {d} must be below the {} points", ds.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub reconstruction: ReconstructionMatrix,
    pub affinity: SparseMatrix,
    pub similarity: SimilarityDiagnostics,
    pub clustering: ClusterResult,
    pub embedding: EmbeddingResult,
    pub metrics: MetricsReport,
}

pub fn run_pipeline(ds: &SpectralDataset, opts: &PipelineOptions) -> Result<PipelineOutput> {
    opts.validate(ds)?;
    let problems = build_problems(&ds.x, opts.k)?;
    run_on_problems(ds, &problems, opts)
}

/// Runs every stage after neighborhood construction.
pub fn run_on_problems(ds: &SpectralDataset, problems: &[NeighborhoodProblem], opts: &PipelineOptions) -> Result<PipelineOutput> {
    opts.validate(ds)?;
    let p = opts.clusters_for(ds)?;
    let d = opts.embed_dim_for(ds)?;
    let start = Instant::now();

    let solutions = solve_all(problems, &opts.solver)?;
    let reconstruction = assemble_reconstruction_matrix(&solutions, ds.len())?;
    let solve_s = start.elapsed().as_secs_f64();

    let t = Instant::now();
    let (w, similarity) = similarity_weights(&reconstruction.r, &ds.x)?;
    let affinity = symmetrize(&w)?;
    let clustering = spectral_cluster(&affinity, p, opts.seed)?;
    let cluster_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let embedding = embed(&reconstruction.r, d)?.with_clusters(&clustering.labels)?;
    let embed_s = t.elapsed().as_secs_f64();

    let mut warnings = Vec::new();
    if let Some(msg) = &embedding.warning {
        warnings.push(msg.clone());
    }
    if !similarity.zero_rows.is_empty() {
        warnings.push(format!("{} points have no positive similarity weight", similarity.zero_rows.len()));
    }
    if !similarity.floored.is_empty() {
        warnings.push(format!("{} neighbor distances were floored", similarity.floored.len()));
    }
    let degenerate = problems.iter().filter(|pr| pr.degenerate.iter().any(|b| *b)).count();
    if degenerate > 0 {
        warnings.push(format!("{degenerate} neighborhoods contain duplicate spectra"));
    }
    for w in &warnings {
        warn!("{w}");
    }

    let mut metrics = MetricsReport {
        k: opts.k,
        lambda: opts.solver.lambda,
        beta: opts.solver.beta,
        seed: opts.seed,
        misclassification_pct: None,
        per_manifold_embedding_error: Default::default(),
        diagnostics: Vec::new(),
        unconverged_points: reconstruction.unconverged_count(),
        isolated_points: clustering.isolated.len(),
        warnings,
        runtimes: Runtimes::default(),
    };
    score(ds, &clustering.labels, &embedding.y, &mut metrics)?;
    metrics.runtimes = Runtimes {
        solve_s,
        cluster_s,
        embed_s,
        total_s: start.elapsed().as_secs_f64(),
    };
    info!(
        "k={} lambda={} solve {:.1}s cluster {:.1}s embed {:.1}s, {} of {} points hit the iteration cap",
        opts.k,
        opts.solver.lambda,
        solve_s,
        cluster_s,
        embed_s,
        metrics.unconverged_points,
        ds.len()
    );

    Ok(PipelineOutput {
        reconstruction,
        affinity,
        similarity,
        clustering,
        embedding,
        metrics,
    })
}

/// Fills the clustering and embedding metrics that the dataset's ground
/// truth supports.
pub fn score(ds: &SpectralDataset, labels: &[usize], y: &DMatrix<f64>, metrics: &mut MetricsReport) -> Result<()> {
    let Some(truth) = &ds.labels else {
        return Ok(());
    };
    metrics.misclassification_pct = Some(misclassification_rate(labels, truth)?);
    if ds.abundances.is_none() || ds.mixtures.is_empty() {
        return Ok(());
    }
    let matching = match_labels(labels, truth)?;
    for (m, endmembers) in ds.mixtures.iter().enumerate() {
        let mut aborted = false;
        for &e in endmembers {
            let Some(row) = ds.endmember_row(e) else {
                metrics.diagnostics.push(format!("mixture {m}: endmember {e} has no pure row"));
                aborted = true;
                continue;
            };
            let assigned = matching.map.get(&labels[row]).copied();
            if !assigned.is_some_and(|t| ds.mixtures[t].contains(&e)) {
                let place = assigned.map_or("an unmatched cluster".to_string(), |t| format!("the cluster of mixture {t}"));
                metrics.diagnostics.push(format!(
                    "mixture {m}: endmember {e} (row {row}) was assigned to {place}, which does not contain it"
                ));
                aborted = true;
            }
        }
        if aborted {
            continue;
        }
        let members: BTreeSet<usize> = ds.manifold_members(m).unwrap_or_default().into_iter().collect();
        let points: Vec<usize> = (0..ds.len())
            .filter(|&i| matching.map.get(&labels[i]) == Some(&m) && members.contains(&i))
            .collect();
        if points.is_empty() {
            metrics.diagnostics.push(format!("mixture {m}: no correctly classified points"));
            continue;
        }
        match mixture_embedding_error(ds, m, y, &points) {
            Ok(err) => {
                metrics.per_manifold_embedding_error.insert(m, err);
            }
            Err(e) => metrics.diagnostics.push(format!("mixture {m}: {e}")),
        }
    }
    Ok(())
}

/// Embedding error of LLE run on the members of one mixture alone.
pub fn lle_baseline_error(ds: &SpectralDataset, mixture: usize, k: usize, reg: f64) -> Result<f64> {
    let members = ds
        .manifold_members(mixture)
        .ok_or_else(|| Error::input(format!("mixture {mixture} has no ground truth")))?;
    let x = ds.x.select_rows(members.iter());
    let r = lle_reconstruction(&x, k, reg)?;
    let d = ds.mixtures[mixture].len() - 1;
    let e = embed(&r.r, d)?;
    let mut y = DMatrix::zeros(d, ds.len());
    for (pos, &i) in members.iter().enumerate() {
        y.set_column(i, &e.y.column(pos));
    }
    mixture_embedding_error(ds, mixture, &y, &members)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k: usize,
    pub lambda: f64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub k_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    /// Row-major over `k_grid` then `lambda_grid`.
    pub cells: Vec<SweepCell>,
}

/// Runs the pipeline on every `(k, lambda)` pair. Failed cells keep their
/// error message and the sweep continues.
pub fn run_sweep(ds: &SpectralDataset, k_grid: &[usize], lambda_grid: &[f64], base: &PipelineOptions) -> SweepTable {
    let mut cells = Vec::with_capacity(k_grid.len() * lambda_grid.len());
    for &k in k_grid {
        let problems = build_problems(&ds.x, k);
        for &lambda in lambda_grid {
            let mut opts = base.clone();
            opts.k = k;
            opts.solver.lambda = lambda;
            let outcome = problems
                .as_ref()
                .map_err(|e| Error::input(e.to_string()))
                .and_then(|p| run_on_problems(ds, p, &opts));
            let cell = match outcome {
                Ok(out) => SweepCell {
                    k,
                    lambda,
                    report: Some(out.metrics),
                    error: None,
                },
                Err(e) => {
                    warn!("k={k} lambda={lambda} failed: {e}");
                    SweepCell {
                        k,
                        lambda,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(cell);
        }
    }
    SweepTable {
        k_grid: k_grid.to_vec(),
        lambda_grid: lambda_grid.to_vec(),
        cells,
    }
}

impl SweepTable {
    pub fn cell(&self, k: usize, lambda: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.k == k && c.lambda == lambda)
    }

    fn value(cell: &SweepCell) -> Option<f64> {
        cell.report.as_ref().and_then(|r| r.misclassification_pct)
    }

    /// Misclassification percentages, one row per k and one column per lambda.
    pub fn to_text(&self) -> String {
        let width = 9;
        let mut s = format!("{:>6}", "k");
        for l in &self.lambda_grid {
            write!(s, " {:>width$}", l.to_string()).expect("writing to a String");
        }
        s.push('\n');
        let mut notes = Vec::new();
        for (r, &k) in self.k_grid.iter().enumerate() {
            write!(s, "{k:>6}").expect("writing to a String");
            for (c, _) in self.lambda_grid.iter().enumerate() {
                let cell = &self.cells[r * self.lambda_grid.len() + c];
                let text = match (Self::value(cell), &cell.error) {
                    (Some(v), _) => format!("{v:.2}"),
                    (None, Some(e)) => {
                        notes.push(format!("k={} lambda={}: {e}", cell.k, cell.lambda));
                        "fail".to_string()
                    }
                    (None, None) => "-".to_string(),
                };
                write!(s, " {text:>width$}").expect("writing to a String");
            }
            s.push('\n');
        }
        for n in notes {
            writeln!(s, "# {n}").expect("writing to a String");
        }
        s
    }

    /// `k` column followed by one misclassification column per lambda.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["k".to_string()];
        header.extend(self.lambda_grid.iter().map(|l| l.to_string()));
        w.write_record(&header).map_err(csv_error)?;
        for (r, &k) in self.k_grid.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            for c in 0..self.lambda_grid.len() {
                let cell = &self.cells[r * self.lambda_grid.len() + c];
                rec.push(Self::value(cell).map_or("NA".to_string(), |v| v.to_string()));
            }
            w.write_record(&rec).map_err(csv_error)?;
        }
        into_string(w)
    }

    /// Long format for plotting: `lambda,misclassification_pct,k`.
    pub fn to_plot_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["lambda", "misclassification_pct", "k"]).map_err(csv_error)?;
        for cell in &self.cells {
            if let Some(v) = Self::value(cell) {
                w.write_record([cell.lambda.to_string(), v.to_string(), cell.k.to_string()])
                    .map_err(csv_error)?;
            }
        }
        into_string(w)
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::numerical(format!("csv encoding failed: {e}"))
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::numerical(format!("csv encoding failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::numerical(format!("csv encoding failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hapke::{generate_mixture_dataset, synthetic_endmembers, MixtureConfig};

    fn small() -> SpectralDataset {
        let em = synthetic_endmembers(20, 4, 1).unwrap();
        generate_mixture_dataset(&em, &MixtureConfig::two_ternary(60, 2)).unwrap()
    }

    fn fast_opts() -> PipelineOptions {
        PipelineOptions {
            k: 10,
            solver: SolverOptions {
                max_iters: 60,
                ..SolverOptions::with_lambda(0.05)
            },
            ..Default::default()
        }
    }

    #[test]
    fn defaults_follow_dataset_metadata() {
        let ds = small();
        let o = PipelineOptions::default();
        assert_eq!(o.clusters_for(&ds).unwrap(), 2);
        assert_eq!(o.embed_dim_for(&ds).unwrap(), 3);
        let bare = SpectralDataset::from_spectra(ds.x.clone());
        assert!(o.clusters_for(&bare).unwrap_err().to_string().contains("clusters"));
    }

    #[test]
    fn pipeline_produces_consistent_outputs() {
        let ds = small();
        let out = run_pipeline(&ds, &fast_opts()).unwrap();
        assert_eq!(out.clustering.labels.len(), ds.len());
        assert_eq!(out.embedding.y.shape(), (3, ds.len()));
        let m = out.metrics.misclassification_pct.unwrap();
        assert!((0.0..=100.0).contains(&m));
        assert!(out.metrics.per_manifold_embedding_error.values().all(|e| *e >= 0.0));
        let again = run_pipeline(&ds, &fast_opts()).unwrap();
        assert_eq!(
            serde_json::to_string(&out.metrics).unwrap(),
            serde_json::to_string(&again.metrics).unwrap()
        );
    }

    #[test]
    fn single_cluster_labels_everything_zero() {
        let ds = small();
        let opts = PipelineOptions {
            clusters: Some(1),
            ..fast_opts()
        };
        let out = run_pipeline(&ds, &opts).unwrap();
        assert!(out.clustering.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn bad_options_name_the_field() {
        let ds = small();
        let mut o = fast_opts();
        o.k = 1;
        assert!(run_pipeline(&ds, &o).unwrap_err().to_string().contains("k:"));
        let mut o = fast_opts();
        o.solver.lambda = -1.0;
        assert!(run_pipeline(&ds, &o).unwrap_err().to_string().contains("lambda"));
    }

    #[test]
    fn sweep_layout_and_consistency() {
        let ds = small();
        let base = fast_opts();
        let t = run_sweep(&ds, &[8, 10], &[0.01, 0.05, 1.0], &base);
        assert_eq!(t.cells.len(), 6);
        let csv = t.to_csv().unwrap();
        let first = csv.lines().next().unwrap();
        assert_eq!(first.split(',').count(), 4);
        assert_eq!(csv.lines().count(), 3);
        let single = t.cell(10, 0.05).unwrap().report.clone().unwrap();
        assert_eq!(
            serde_json::to_string(&single).unwrap(),
            serde_json::to_string(&run_pipeline(&ds, &base).unwrap().metrics).unwrap()
        );
        assert!(t.to_text().lines().next().unwrap().contains("0.05"));

        let empty = run_sweep(&ds, &[], &[], &base);
        assert!(empty.cells.is_empty());
        assert_eq!(empty.to_csv().unwrap().trim(), "k");
    }

    #[test]
    fn failed_cells_are_recorded() {
        let ds = small();
        let t = run_sweep(&ds, &[10_000, 10], &[0.05], &fast_opts());
        assert!(t.cells[0].error.is_some());
        assert!(t.cells[1].report.is_some());
        assert!(t.to_text().contains("fail"));
        assert!(t.to_csv().unwrap().contains("NA"));
    }

    #[test]
    fn lle_baseline_runs_per_mixture() {
        let ds = small();
        for m in 0..2 {
            let e = lle_baseline_error(&ds, m, 10, 1e-3).unwrap();
            assert!(e.is_finite() && e >= 0.0);
        }
    }
}
