mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Config, EmbedMethod};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

impl From<lrne::Error> for CliError {
    fn from(e: lrne::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

/// Low-rank neighborhood embedding of spectral mixtures.
///
/// Every option can be set in the TOML config; flags override the config.
/// Run `lrne print-config` for the full default config.
#[derive(Debug, Parser)]
#[command(name = "lrne", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// TOML config file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory; must be new or empty [default: runs/<command>-<unix time>].
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Dataset CSV with JSON sidecar; replaces the simulation block.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Global seed [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for every core [default: 0].
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Neighborhood size [default: 35].
    #[arg(long, short, global = true)]
    k: Option<usize>,
    /// Trace-Lasso weight [default: 0.01].
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// ADMM penalty [default: 1].
    #[arg(long, global = true, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// ADMM iteration cap [default: 500].
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Number of clusters [default: number of mixtures].
    #[arg(long, global = true)]
    clusters: Option<usize>,
    /// Embedding dimension [default: distinct endmembers minus one].
    #[arg(long, global = true)]
    embed_dim: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate an intimate-mixture dataset (dataset.csv + dataset.json).
    Simulate,
    /// Cluster and embed a dataset (labels.csv, embedding.csv, metrics.json).
    Pipeline,
    /// Run the pipeline over a (k, lambda) grid (sweep.txt, sweep.csv, sweep_plot.csv, sweep.json).
    Sweep,
    /// Randomized checks of the norm inequalities and the dominance condition (theory.json, theory.txt).
    Theory {
        /// Norm-inequality trials [default: 1000].
        #[arg(long)]
        trials: Option<usize>,
        /// Dominance-condition trials [default: 200].
        #[arg(long)]
        ipd_trials: Option<usize>,
    },
    /// Embed a dataset without clustering (embedding.csv).
    Embed {
        /// Reconstruction method [default: lrne].
        #[arg(long, value_enum)]
        method: Option<EmbedMethod>,
    },
    /// Score existing labels and an optional embedding against ground truth (metrics.json).
    Evaluate {
        /// CSV with `point,label` columns.
        #[arg(long)]
        labels: PathBuf,
        /// CSV with `point,label,y1..yd` columns.
        #[arg(long)]
        embedding: Option<PathBuf>,
    },
    /// Print the effective config as TOML.
    PrintConfig,
}

impl Overrides {
    fn apply(&self, c: &mut Config) {
        if let Some(v) = &self.out {
            c.output.dir = Some(v.clone());
        }
        if let Some(v) = &self.dataset {
            c.dataset.path = Some(v.clone());
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.threads {
            c.threads = v;
        }
        if let Some(v) = self.k {
            c.pipeline.k = v;
        }
        if let Some(v) = self.lambda {
            c.pipeline.lambda = v;
        }
        if let Some(v) = self.beta {
            c.pipeline.beta = v;
        }
        if let Some(v) = self.max_iters {
            c.pipeline.max_iters = v;
        }
        if self.clusters.is_some() {
            c.pipeline.clusters = self.clusters;
        }
        if self.embed_dim.is_some() {
            c.pipeline.embed_dim = self.embed_dim;
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.overrides.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    cli.overrides.apply(&mut config);
    match &cli.command {
        Command::Theory { trials, ipd_trials } => {
            if let Some(t) = trials {
                config.theory.trials = *t;
            }
            if let Some(t) = ipd_trials {
                config.theory.ipd_trials = *t;
            }
        }
        Command::Embed { method: Some(m) } => config.embed.method = *m,
        _ => {}
    }
    config.validate()?;

    if let Command::PrintConfig = cli.command {
        print!("{}", toml::to_string(&config).map_err(|e| CliError::Input(e.to_string()))?);
        return Ok(());
    }
    if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global()
            .map_err(|e| CliError::Input(format!("threads: {e}")))?;
    }

    let name = match &cli.command {
        Command::Simulate => "simulate",
        Command::Pipeline => "pipeline",
        Command::Sweep => "sweep",
        Command::Theory { .. } => "theory",
        Command::Embed { .. } => "embed",
        Command::Evaluate { .. } => "evaluate",
        Command::PrintConfig => unreachable!(),
    };
    let out = commands::OutputDir::create(config.output.dir.as_deref(), name)?;
    let result = match &cli.command {
        Command::Simulate => commands::simulate(&config, &out),
        Command::Pipeline => commands::pipeline(&config, &out),
        Command::Sweep => commands::sweep(&config, &out),
        Command::Theory { .. } => commands::theory(&config, &out),
        Command::Embed { .. } => commands::embed(&config, &out),
        Command::Evaluate { labels, embedding } => commands::evaluate(&config, &out, labels, embedding.as_deref()),
        Command::PrintConfig => unreachable!(),
    };
    if let Err(e) = &result {
        out.mark_stale(e);
    } else {
        eprintln!("outputs written to {}", out.path().display());
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
