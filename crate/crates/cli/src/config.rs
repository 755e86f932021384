use std::path::{Path, PathBuf};

use lrne::admm::SolverOptions;
use lrne::hapke::{synthetic_endmembers, EndmemberSet, MixtureConfig, SamplingMode};
use lrne::pipeline::{PipelineOptions, DEFAULT_K_GRID, DEFAULT_LAMBDA_GRID};
use lrne::dataset::read_matrix_csv;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    /// Worker threads for per-point solves and sweep cells; 0 uses every core.
    pub threads: usize,
    pub output: OutputSection,
    pub dataset: DatasetSection,
    pub simulation: SimulationSection,
    pub pipeline: PipelineSection,
    pub sweep: SweepSection,
    pub theory: TheorySection,
    pub embed: EmbedSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Spectra CSV with its JSON sidecar; when unset the simulation block is used.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub bands: usize,
    pub endmembers: usize,
    pub endmember_seed: u64,
    /// CSV of endmember reflectances, one endmember per row.
    pub endmember_file: Option<PathBuf>,
    pub mixtures: Vec<Vec<usize>>,
    pub samples_per_mixture: usize,
    pub sampling: SamplingMode,
    pub grid_resolution: usize,
    pub noise_sigma: f64,
    /// Falls back to the top-level seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub max_iters: usize,
    pub tol_primal: f64,
    pub tol_alpha: f64,
    /// Defaults to the number of mixtures.
    pub clusters: Option<usize>,
    /// Defaults to the number of distinct endmembers minus one.
    pub embed_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub k_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub trials: usize,
    pub max_n: usize,
    pub ipd_trials: usize,
    pub ipd_lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMethod {
    Lrne,
    Lle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    pub method: EmbedMethod,
    pub lle_reg: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            threads: 0,
            output: OutputSection::default(),
            dataset: DatasetSection::default(),
            simulation: SimulationSection::default(),
            pipeline: PipelineSection::default(),
            sweep: SweepSection::default(),
            theory: TheorySection::default(),
            embed: EmbedSection::default(),
        }
    }
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            bands: 100,
            endmembers: 4,
            endmember_seed: 1,
            endmember_file: None,
            mixtures: MixtureConfig::two_ternary(1003, 0).endmember_indices,
            samples_per_mixture: 1003,
            sampling: SamplingMode::UniformRandom,
            grid_resolution: 10,
            noise_sigma: 0.0,
            seed: None,
        }
    }
}

impl Default for PipelineSection {
    fn default() -> Self {
        let s = SolverOptions::default();
        PipelineSection {
            k: 35,
            lambda: s.lambda,
            beta: s.beta,
            max_iters: s.max_iters,
            tol_primal: s.tol_primal,
            tol_alpha: s.tol_alpha,
            clusters: None,
            embed_dim: None,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            k_grid: DEFAULT_K_GRID.to_vec(),
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
        }
    }
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            trials: 1000,
            max_n: 8,
            ipd_trials: 200,
            ipd_lambda: 0.01,
        }
    }
}

impl Default for EmbedSection {
    fn default() -> Self {
        EmbedSection {
            method: EmbedMethod::Lrne,
            lle_reg: lrne::embed::DEFAULT_LLE_REG,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            lambda: self.pipeline.lambda,
            beta: self.pipeline.beta,
            max_iters: self.pipeline.max_iters,
            tol_primal: self.pipeline.tol_primal,
            tol_alpha: self.pipeline.tol_alpha,
        }
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            k: self.pipeline.k,
            solver: self.solver(),
            clusters: self.pipeline.clusters,
            embed_dim: self.pipeline.embed_dim,
            seed: self.seed,
        }
    }

    pub fn mixture_config(&self) -> MixtureConfig {
        let s = &self.simulation;
        MixtureConfig {
            endmember_indices: s.mixtures.clone(),
            samples_per_mixture: s.samples_per_mixture,
            sampling: s.sampling,
            grid_resolution: s.grid_resolution,
            noise_sigma: s.noise_sigma,
            seed: s.seed.unwrap_or(self.seed),
        }
    }

    pub fn endmember_set(&self) -> Result<EndmemberSet, CliError> {
        let s = &self.simulation;
        match &s.endmember_file {
            Some(path) => {
                let rows = read_matrix_csv(path).map_err(CliError::from)?;
                let names = (0..rows.nrows()).map(|j| format!("em{j}")).collect();
                EndmemberSet::new(rows.transpose(), names)
                    .map_err(|e| CliError::Input(format!("simulation.endmember_file: {e}")))
            }
            None => {
                if s.bands == 0 {
                    return Err(CliError::Input("simulation.bands: must be at least 1".into()));
                }
                if s.endmembers < 2 {
                    return Err(CliError::Input("simulation.endmembers: must be at least 2".into()));
                }
                synthetic_endmembers(s.bands, s.endmembers, s.endmember_seed)
                    .map_err(|e| CliError::Input(format!("simulation: {e}")))
            }
        }
    }

    /// Range checks that do not depend on the dataset.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Input(format!("{field}: {msg}")));
        let p = &self.pipeline;
        if p.k < 2 {
            return bad("pipeline.k", format!("must be at least 2, got {}", p.k));
        }
        if !(p.lambda >= 0.0 && p.lambda.is_finite()) {
            return bad("pipeline.lambda", format!("must be finite and >= 0, got {}", p.lambda));
        }
        if !(p.beta > 0.0 && p.beta.is_finite()) {
            return bad("pipeline.beta", format!("must be finite and > 0, got {}", p.beta));
        }
        if p.max_iters == 0 {
            return bad("pipeline.max_iters", "must be at least 1".into());
        }
        if !(p.tol_primal > 0.0) {
            return bad("pipeline.tol_primal", format!("must be > 0, got {}", p.tol_primal));
        }
        if !(p.tol_alpha > 0.0) {
            return bad("pipeline.tol_alpha", format!("must be > 0, got {}", p.tol_alpha));
        }
        if p.clusters == Some(0) {
            return bad("pipeline.clusters", "must be at least 1".into());
        }
        if p.embed_dim == Some(0) {
            return bad("pipeline.embed_dim", "must be at least 1".into());
        }
        if let Some(k) = self.sweep.k_grid.iter().find(|&&k| k < 2) {
            return bad("sweep.k_grid", format!("every k must be at least 2, got {k}"));
        }
        if let Some(l) = self.sweep.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return bad("sweep.lambda_grid", format!("every lambda must be finite and >= 0, got {l}"));
        }
        if self.theory.max_n == 0 {
            return bad("theory.max_n", "must be at least 1".into());
        }
        if !(self.theory.ipd_lambda >= 0.0 && self.theory.ipd_lambda.is_finite()) {
            return bad("theory.ipd_lambda", format!("must be finite and >= 0, got {}", self.theory.ipd_lambda));
        }
        if !(self.embed.lle_reg >= 0.0 && self.embed.lle_reg.is_finite()) {
            return bad("embed.lle_reg", format!("must be finite and >= 0, got {}", self.embed.lle_reg));
        }
        let s = &self.simulation;
        if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
            return bad("simulation.noise_sigma", format!("must be finite and >= 0, got {}", s.noise_sigma));
        }
        if self.dataset.path.is_none() {
            let em = self.endmember_set()?;
            self.mixture_config()
                .validate(em.count())
                .map_err(|e| CliError::Input(format!("simulation.{}", strip_kind(&e.to_string()))))?;
        }
        Ok(())
    }
}

fn strip_kind(msg: &str) -> String {
    let msg = msg.strip_prefix("invalid input: ").unwrap_or(msg);
    match msg.strip_prefix("endmember_indices") {
        Some(rest) => format!("mixtures{rest}"),
        None => msg.to_string(),
    }
}
