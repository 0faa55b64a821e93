//! `ldistill`: certificates, distillation experiments, sweeps and region dumps.
//!
//! Settings come from an optional TOML file; command-line flags override it.
//! The output directory is taken from `--output-dir`, then the
//! `LDISTILL_OUTPUT_DIR` environment variable, then the file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ldistill::harness::{SchemeRegistry, SweepParam};

use crate::commands::CheckFailed;
use crate::config::{RunConfig, OUTPUT_DIR_ENV};

#[derive(Parser, Debug)]
#[command(name = "ldistill", version, about = "Localization distillation toolkit")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Overrides the environment and the config file.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Root seed for certificates and generated scenes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the analytic identities on random instances and write certificate.json.
    Verify(VerifyArgs),
    /// Train every scheme on every seed and write metrics, traces and datasets.
    Experiment(HarnessArgs),
    /// Write the main and VLR flags of every anchor in a scene.
    DumpAssignment(AssignmentArgs),
    /// Rerun the experiment over a grid of one parameter.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    mc_trials: Option<usize>,
    #[arg(long)]
    eta_scale: Option<f64>,
    /// Adds a constant to every LD gradient entry before comparison.
    #[arg(long, hide = true, default_value_t = 0.0)]
    perturb_gradient: f64,
}

#[derive(Args, Debug)]
struct HarnessArgs {
    /// Comma-separated scheme names.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<String>>,
    /// Comma-separated experiment seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    ambiguity: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Lower VLR threshold as a fraction of alpha_pos.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args, Debug)]
struct AssignmentArgs {
    /// JSON scene file with `anchors` and `gts`.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    alpha_pos: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ParamArg {
    Ambiguity,
    Gamma,
    Tau,
}

impl From<ParamArg> for SweepParam {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::Ambiguity => SweepParam::Ambiguity,
            ParamArg::Gamma => SweepParam::Gamma,
            ParamArg::Tau => SweepParam::Tau,
        }
    }
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: Option<ParamArg>,
    /// Comma-separated values; defaults to the parameter's standard grid.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    #[command(flatten)]
    harness: HarnessArgs,
}

impl HarnessArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let h = &mut cfg.experiment;
        if let Some(v) = &self.schemes {
            h.schemes = v.clone();
        }
        if let Some(v) = &self.seeds {
            h.seeds = v.clone();
        }
        if let Some(v) = self.epochs {
            h.train.epochs = v;
        }
        if let Some(v) = self.ambiguity {
            h.data.ambiguity = v;
        }
        if let Some(v) = self.tau {
            h.distill.tau = v;
        }
        if let Some(v) = self.gamma {
            h.distill.gamma_vlr = v;
        }
    }
}

/// Merges file, environment and flags into one validated config.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
        cfg.output_dir = dir.into();
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Verify(a) => {
            let v = &mut cfg.verify;
            v.trials = a.trials.unwrap_or(v.trials);
            v.mc_trials = a.mc_trials.unwrap_or(v.mc_trials);
            v.eta_scale = a.eta_scale.unwrap_or(v.eta_scale);
        }
        Command::Experiment(a) => a.apply(&mut cfg),
        Command::DumpAssignment(a) => {
            let s = &mut cfg.assignment;
            if a.scene.is_some() {
                s.scene = a.scene.clone();
            }
            s.alpha_pos = a.alpha_pos.unwrap_or(s.alpha_pos);
            s.gamma = a.gamma.unwrap_or(s.gamma);
        }
        Command::Sweep(a) => {
            a.harness.apply(&mut cfg);
            if let Some(p) = a.param {
                let p = SweepParam::from(p);
                if p != cfg.sweep.parameter && a.values.is_none() {
                    cfg.sweep.values.clear();
                }
                cfg.sweep.parameter = p;
            }
            if let Some(v) = &a.values {
                cfg.sweep.values = v.clone();
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let registry = SchemeRegistry::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build()
        .context("building thread pool")?;
    pool.install(|| match &cli.command {
        Command::Verify(a) => commands::verify(&cfg, a.perturb_gradient),
        Command::Experiment(_) => commands::experiment(&cfg, &registry),
        Command::DumpAssignment(_) => commands::dump_assignment(&cfg),
        Command::Sweep(_) => commands::run_sweep(&cfg, &registry),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<CheckFailed>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
