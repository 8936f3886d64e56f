//! Command-line front end: config resolution and subcommand dispatch.
//!
//! Precedence is built-in defaults, then the `--config` JSON file, then
//! command-line flags. The resolved config is written next to every run's
//! artifacts and parses back to the same value.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, EstimateLayer, Policy, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "lance", version, about = "Low-rank activation compression for on-device training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute per-layer subspaces for a checkpoint and write `bank.bin`.
    Calibrate,
    /// Train the trainable layers under full or low-rank storage.
    Finetune,
    /// Run a continual-learning task sequence with null-space memory.
    Cl,
    /// Print the memory and FLOPs report.
    Estimate(EstimateArgs),
    /// Angle between low-rank and full gradients on the first K batches.
    GradAlign {
        #[arg(long, default_value_t = 5)]
        batches: usize,
    },
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Input dims, batch first, comma separated.
    #[arg(long, value_delimiter = ',', requires_all = ["ranks", "out_dim"])]
    pub dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    #[arg(long)]
    pub out_dim: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single thread, no wall-clock fields: identical inputs give identical bytes.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub policy: Option<Policy>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub calib_batches: Option<usize>,
    /// Number of trailing weighted layers to train; 0 trains all.
    #[arg(long, global = true)]
    pub trainable: Option<usize>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub bank: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$target = v.clone();
                }
            )*};
        }
        set!(seed => seed, out => out, epochs => epochs, eps => eps, policy => policy, lr => lr,
             batch_size => batch_size, calib_batches => calib_batches, trainable => trainable_layers);
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.bank {
            cfg.bank = Some(p.clone());
        }
        cfg.deterministic |= self.deterministic;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sizes the global pool: one thread when deterministic, else `LANCE_THREADS`
/// if set, else rayon's default. A pool that already exists is kept.
pub fn init_threads(deterministic: bool) -> Result<()> {
    let threads = if deterministic {
        1
    } else {
        match std::env::var("LANCE_THREADS") {
            Ok(v) => v
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .with_context(|| format!("LANCE_THREADS must be a positive integer, got `{v}`"))?,
            Err(_) => 0,
        }
    };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.overrides.resolve()?;
    if let Command::Estimate(a) = &cli.command {
        if let (Some(dims), Some(ranks), Some(out_dim)) = (&a.dims, &a.ranks, a.out_dim) {
            cfg.estimate = vec![EstimateLayer {
                dims: dims.clone(),
                ranks: ranks.clone(),
                out_dim,
            }];
        } else if a.ranks.is_some() || a.out_dim.is_some() {
            bail!("--ranks and --out-dim need --dims");
        }
    }
    init_threads(cfg.deterministic)?;
    commands::prepare_output(&cfg)?;
    match cli.command {
        Command::Calibrate => commands::calibrate(&cfg),
        Command::Finetune => commands::finetune(&cfg),
        Command::Cl => commands::continual(&cfg),
        Command::Estimate(_) => {
            let report = commands::estimate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::GradAlign { batches } => commands::grad_align(&cfg, batches),
    }
}
