//! Command-line interface.

use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use lmcascade_core::diffgraph::gradcheck::{oracle_suite, TOLERANCE};
use lmcascade_core::train::Mode;

use crate::config::{describe_defaults, RunConfig};
use crate::dataset;
use crate::evaluate::{evaluate, CkptArg, EvalOptions};
use crate::predict::predict;
use crate::training::{train, TrainOptions};
use crate::{AppError, AppResult, FORMAT_VERSION};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (config format 1)");

#[derive(Debug, Parser)]
#[command(name = "lmcascade", version = VERSION, about = "Coarse-to-fine 3D landmark localization")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Number of phantoms (default: dataset.n).
        #[arg(long)]
        n: Option<usize>,
        /// Master seed (default: phantom.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing dataset in OUT.
        #[arg(long)]
        force: bool,
    },
    /// Train one mode.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Training mode (default: train.mode).
        #[arg(long)]
        mode: Option<Mode>,
        /// Output directory for metrics.csv, best.ckpt and last.ckpt.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Training seed (default: train.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many epochs.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate checkpoints on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file or training directory, optionally `MODE=PATH`.
        #[arg(long, num_args = 1.., required = true)]
        ckpt: Vec<CkptArg>,
        /// Monte-Carlo passes for noise-trained modes (default: eval.mc_passes).
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Monte-Carlo seed (default: train.seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Report one noise-free pass instead of the Monte-Carlo mean.
        #[arg(long)]
        single_pass: bool,
    },
    /// Predict the landmarks of one base-resolution volume; prints JSON.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Average this many noisy passes.
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every graph operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn command() -> clap::Command {
    let keys = format!(
        "Config keys (format {FORMAT_VERSION}) and defaults; set them in --config or with --set KEY=VALUE:\n{}",
        describe_defaults()
    );
    Cli::command().after_long_help(keys.clone()).after_help(keys)
}

fn load(cfg: &ConfigArgs) -> AppResult<RunConfig> {
    RunConfig::load(cfg.config.as_deref(), &cfg.set)
}

fn execute(cli: Cli) -> AppResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(AppError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| AppError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Gen {
            cfg,
            out,
            n,
            seed,
            force,
        } => {
            let cfg = load(&cfg)?;
            let n = n.unwrap_or(cfg.dataset.n);
            let seed = seed.unwrap_or(cfg.phantom.seed);
            let m = dataset::generate(&cfg, &out, n, seed, force)?;
            eprintln!("generated {} phantoms into {}", m.samples.len(), out.display());
        }
        Command::Train {
            cfg,
            data,
            mode,
            out,
            resume,
            seed,
            stop_after,
            quiet,
        } => {
            let mut cfg = load(&cfg)?;
            if let Some(m) = mode {
                cfg.train.mode = m;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let r = train(
                &cfg,
                &TrainOptions {
                    data,
                    out,
                    resume,
                    stop_after,
                    verbose: !quiet,
                },
            )?;
            if let Some(b) = r.best {
                eprintln!("best epoch {} val_error_mm {}", b.epoch, b.val_error_mm);
            }
        }
        Command::Eval {
            cfg,
            data,
            ckpt,
            mc,
            out,
            seed,
            single_pass,
        } => {
            let cfg = load(&cfg)?;
            let opts = EvalOptions {
                data,
                ckpts: ckpt,
                mc: mc.unwrap_or(cfg.eval.mc_passes),
                out,
                seed: seed.unwrap_or(cfg.train.seed),
                single_pass: single_pass || cfg.eval.single_pass,
            };
            let rep = evaluate(&cfg, &opts)?;
            for (mode, s) in &rep.summary.modes {
                eprintln!("{mode}: median {:.3} mm, mean {:.3} mm (n={})", s.median, s.mean, s.n);
            }
        }
        Command::Predict { ckpt, volume, mc, seed } => {
            let p = predict(&ckpt, &volume, mc, seed)?;
            println!("{}", serde_json::to_string(&p).expect("prediction serializes"));
        }
        Command::Gradcheck { seeds, seed } => {
            if seeds == 0 {
                return Err(AppError::Usage("--seeds must be >= 1".into()));
            }
            let checks = oracle_suite(seeds, seed).map_err(AppError::from)?;
            let mut ok = true;
            for c in &checks {
                println!(
                    "{} {} seeds={} max_rel_error={:.3e}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.op,
                    c.seeds,
                    c.max_rel_error
                );
                ok &= c.passed();
            }
            if !ok {
                return Err(AppError::Runtime(format!("gradient check above {TOLERANCE:e}")));
            }
        }
    }
    Ok(())
}

/// Run the command line and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let first = e
                        .to_string()
                        .lines()
                        .next()
                        .unwrap_or("")
                        .trim_start_matches("error: ")
                        .to_string();
                    eprintln!("{}", AppError::Usage(first).diagnostic());
                    1
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", AppError::Usage(e.to_string()).diagnostic());
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.exit_code()
        }
    }
}
