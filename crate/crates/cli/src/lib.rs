//! Library side of the `crfconv` binary. Every subcommand is a function of a
//! [`RunConfig`] that writes its results under the output directory and returns
//! the paths it wrote.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "crfconv", version, about = "Continuous CRF smoothing and label refinement on point clouds")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags that replace the matching config entries.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Input cloud (.ply or .csv).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Output directory; also settable through CRFCONV_OUTPUT_DIR.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Output cloud format: csv or ply.
    #[arg(long, global = true)]
    pub output_format: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub dilation: Option<usize>,
    /// Squared-distance radius; switches to a radius graph.
    #[arg(long, global = true)]
    pub radius: Option<f64>,
    /// Mean-field steps of the continuous CRF.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// jacobi or gauss-seidel.
    #[arg(long, global = true)]
    pub schedule: Option<String>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long, global = true)]
    pub activation: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the neighbour graph and write it as a src,dst,distance edge list.
    BuildGraph,
    /// Run the CRF layer on the cloud features; write the smoothed cloud and energy trace.
    Smooth {
        /// Also solve for the exact minimiser and report the deviation on stderr.
        #[arg(long)]
        check_exact: bool,
    },
    /// Refine per-point label probabilities with the discrete CRF.
    RefineLabels {
        /// N x L probability CSV (overrides input.probabilities).
        #[arg(long)]
        probabilities: Option<PathBuf>,
        /// Mean-field steps (overrides discrete.steps).
        #[arg(long)]
        label_steps: Option<usize>,
    },
    /// Compare the CRF layer against graph diffusion step by step.
    DiffuseCompare {
        /// Number of steps (overrides diffusion.steps).
        #[arg(long)]
        diffusion_steps: Option<usize>,
    },
    /// Run the CRF layer for several step counts and tabulate energy and fidelity.
    SweepSteps {
        /// Comma separated step counts (overrides crf.sweep).
        #[arg(long, value_delimiter = ',')]
        t: Vec<usize>,
        /// Add a wall_ms column; the file is then no longer reproducible.
        #[arg(long)]
        timing: bool,
    },
    /// Check the solver against its exact oracles on the configured input.
    CheckOracle,
}

/// Loads the config (file, then environment, then flags) and validates it.
pub fn resolve_config(config: Option<&std::path::Path>, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(config::OUTPUT_DIR_ENV) {
        cfg.output.dir = dir.into();
    }
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    if let Some(p) = &o.input {
        cfg.input.path = Some(p.clone());
    }
    if let Some(r) = o.radius {
        cfg.graph.radius = Some(r);
    }
    set!(o.output_dir => cfg.output.dir);
    set!(o.output_format => cfg.output.format);
    set!(o.seed => cfg.seed);
    set!(o.threads => cfg.threads);
    set!(o.k => cfg.graph.k);
    set!(o.dilation => cfg.graph.dilation);
    set!(o.steps => cfg.crf.steps);
    set!(o.schedule => cfg.crf.schedule);
    set!(o.tol => cfg.crf.tol);
    set!(o.activation => cfg.crf.activation);
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed command line; returns the files written.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let mut cfg = resolve_config(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::RefineLabels {
            probabilities,
            label_steps,
        } => {
            if let Some(p) = probabilities {
                cfg.input.probabilities = Some(p.clone());
            }
            if let Some(s) = label_steps {
                cfg.discrete.steps = *s;
            }
        }
        Command::DiffuseCompare {
            diffusion_steps: Some(s),
        } => cfg.diffusion.steps = *s,
        Command::SweepSteps { t, .. } if !t.is_empty() => cfg.crf.sweep = t.clone(),
        _ => {}
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .context("building the worker pool")?;
    pool.install(|| match cli.command {
        Command::BuildGraph => commands::build_graph(&cfg),
        Command::Smooth { check_exact } => commands::smooth(&cfg, check_exact),
        Command::RefineLabels { .. } => commands::refine_labels(&cfg),
        Command::DiffuseCompare { .. } => commands::diffuse_compare(&cfg),
        Command::SweepSteps { timing, .. } => commands::sweep_steps(&cfg, timing),
        Command::CheckOracle => commands::check_oracle(&cfg),
    })
}
