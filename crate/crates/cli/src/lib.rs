//! Command-line workflow: simulate a dataset, train a model on it, apply the
//! model to any other dataset, and score reconstructions.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{EvalOptions, Period, Tiling};
use config::{Family, RunConfig};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "gapfill", version, about = "Gap filling for gappy space-time rasters")]
pub struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (falls back to the config, then GAPFILL_SEED, then 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Threads for batch items and patches; 1 is fully deterministic.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic truth and its cloudy observation.
    Simulate {
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured model family.
    Train {
        /// Observation file; defaults to the config's `data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Model family; overrides the config.
        #[arg(long, value_enum)]
        family: Option<Family>,
        /// Number of epochs; overrides the config.
        #[arg(long)]
        epochs: Option<usize>,
        /// Adam learning rate; overrides the config.
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Reconstruct a dataset with a saved model, normalized with its own statistics.
    Infer {
        #[command(flatten)]
        io: InferArgs,
        /// Patch size `ROWSxCOLS` (or one number for squares); enables tiling.
        #[arg(long, value_parser = parse_pair, requires = "overlap")]
        patch: Option<(usize, usize)>,
        /// Minimum patch overlap `ROWSxCOLS`.
        #[arg(long, value_parser = parse_pair, requires = "patch")]
        overlap: Option<(usize, usize)>,
    },
    /// Patch-wise reconstruction merged by overlap averaging.
    TileInfer {
        #[command(flatten)]
        io: InferArgs,
        /// Patch size `ROWSxCOLS` (or one number for squares).
        #[arg(long, value_parser = parse_pair)]
        patch: (usize, usize),
        /// Minimum patch overlap `ROWSxCOLS`.
        #[arg(long, value_parser = parse_pair)]
        overlap: (usize, usize),
    },
    /// Iterative EOF filling.
    Dineof {
        /// Gappy field to fill.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the filled field.
        #[arg(long)]
        output: PathBuf,
        /// Split of the input to fill.
        #[arg(long, value_enum, default_value_t = Period::All)]
        period: Period,
        /// Fixed number of modes; cross-validated when omitted.
        #[arg(long, conflicts_with = "cv")]
        modes: Option<usize>,
        /// Pick the number of modes by cross-validation (the default).
        #[arg(long)]
        cv: bool,
        /// Where to write the `r,rmse` cross-validation curve.
        #[arg(long)]
        cv_curve: Option<PathBuf>,
    },
    /// Score reconstructions against a target on the pixels hidden from the observation.
    Eval {
        /// Complete reference field.
        #[arg(long)]
        target: PathBuf,
        /// Observation the reconstructions were made from.
        #[arg(long)]
        obs: PathBuf,
        /// `NAME=PATH` of a reconstruction; repeatable.
        #[arg(long = "pred", value_parser = parse_named)]
        preds: Vec<(String, PathBuf)>,
        /// Directory for reports, maps and the comparison table.
        #[arg(long)]
        out: PathBuf,
        /// Write per-frame PGM error maps.
        #[arg(long)]
        maps: bool,
        /// Include the mean-fill baseline in the comparison.
        #[arg(long)]
        baseline: bool,
    },
    /// Monthly mean fields of a dataset.
    Report {
        /// Field to summarize.
        #[arg(long)]
        input: PathBuf,
        /// Directory for the monthly fields and `monthly.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Gappy field to reconstruct.
    #[arg(long)]
    pub input: PathBuf,
    /// Where to write the reconstruction.
    #[arg(long)]
    pub output: PathBuf,
    /// Split of the input to reconstruct.
    #[arg(long, value_enum, default_value_t = Period::All)]
    pub period: Period,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((a, b)) => Ok((num(a)?, num(b)?)),
        None => num(s).map(|v| (v, v)),
    }
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=PATH, got `{s}`")),
    }
}

/// Runs one parsed command line, printing a short summary on stdout.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?.seeded(cli.seed)?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        cfg.train.workers = w;
    }
    let workers = cfg.train.workers;
    match cli.command {
        Command::Simulate { out } => {
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let s = commands::cmd_simulate(&cfg, &dir)?;
            println!("wrote {} and {}", s.truth.display(), s.obs.display());
            println!("missing fraction: {:.4}", s.missing_fraction);
        }
        Command::Train {
            data,
            out,
            family,
            epochs,
            lr,
        } => {
            if let Some(f) = family {
                cfg.family = f;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = lr;
            }
            let data = data
                .or_else(|| cfg.data.clone())
                .ok_or_else(|| CliError::Config("no training data: pass --data or set `data`".into()))?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let t = commands::cmd_train(&cfg, &data, &dir)?;
            if let Some(last) = t.history.epochs.last() {
                println!(
                    "validation loss {:.6} -> {:.6} after {} epochs",
                    t.history.initial_valid_loss,
                    last.valid_loss,
                    t.history.epochs.len()
                );
            }
            println!("wrote {}", t.checkpoint.display());
        }
        Command::Infer { io, patch, overlap } => {
            let tiling = patch.zip(overlap).map(|(patch, overlap)| Tiling { patch, overlap });
            infer(&cfg, io, tiling, workers)?;
        }
        Command::TileInfer { io, patch, overlap } => {
            infer(&cfg, io, Some(Tiling { patch, overlap }), workers)?;
        }
        Command::Dineof {
            input,
            output,
            period,
            modes,
            cv: _,
            cv_curve,
        } => {
            let d = commands::cmd_dineof(&cfg, &input, &output, period, modes, cv_curve.as_deref())?;
            println!("{} modes{}", d.modes, if d.converged { "" } else { " (not converged)" });
            println!("wrote {}", output.display());
        }
        Command::Eval {
            target,
            obs,
            preds,
            out,
            maps,
            baseline,
        } => {
            if preds.is_empty() && !baseline {
                return Err(CliError::Config("nothing to evaluate: pass --pred or --baseline".into()));
            }
            let opts = EvalOptions { maps, baseline };
            let rows = commands::cmd_eval(&cfg, &target, &obs, &preds, &out, &opts)?;
            println!("method,RMSLE,RE%");
            for (name, r) in rows {
                println!("{name},{:.6},{:.4}", r.rmsle, r.re_percent);
            }
        }
        Command::Report { input, out } => {
            let files = commands::cmd_report(&input, &out)?;
            println!("wrote {} monthly means to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn infer(cfg: &RunConfig, io: InferArgs, tiling: Option<Tiling>, workers: usize) -> Result<()> {
    commands::cmd_infer(cfg, &io.model, &io.input, &io.output, io.period, tiling, workers)?;
    println!("wrote {}", io.output.display());
    Ok(())
}
