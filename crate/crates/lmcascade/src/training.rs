//! Training driver: epochs, validation, metrics log and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lmcascade_core::cascade::{CascadeConfig, Model};
use lmcascade_core::phantom::{LandmarkSample, Split};
use lmcascade_core::train::{sample_error_sum, EpochLog, Trainer};
use rayon::prelude::*;

use crate::checkpoint::{self, Best, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::{AppError, AppResult};

pub const METRICS: &str = "metrics.csv";
pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation.
    pub stop_after: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub next_epoch: usize,
    pub last_val_error_mm: Option<f64>,
    pub best: Option<Best>,
}

/// Mean final-scale error over `samples`, one sample per task.
pub fn validation_error(model: &Model, cfg: &CascadeConfig, samples: &[LandmarkSample]) -> AppResult<f64> {
    if samples.is_empty() {
        return Err(lmcascade_core::Error::EmptySplit("validation").into());
    }
    let sums = samples
        .par_iter()
        .map(|s| sample_error_sum(model, cfg, s))
        .collect::<Result<Vec<f64>, _>>()?;
    let n: usize = samples.iter().map(|s| s.landmarks.len()).sum();
    Ok(sums.iter().sum::<f64>() / n as f64)
}

fn header(n_scales: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "train_loss".into(), "val_error_mm".into()];
    h.extend((0..n_scales).map(|s| format!("weight_s{s}")));
    h
}

fn row(log: &EpochLog, val: f64) -> Vec<String> {
    let mut r = vec![log.epoch.to_string(), log.train_loss.to_string(), val.to_string()];
    r.extend(log.weights.iter().map(|w| w.to_string()));
    r
}

/// Keep the header and the rows of epochs before `epoch`.
fn truncate_metrics(path: &Path, epoch: usize, header: &[String]) -> AppResult<()> {
    let mut rows = Vec::new();
    if path.exists() {
        let mut rd = csv::Reader::from_path(path).map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
        for rec in rd.records() {
            let rec = rec.map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
            let e: usize = rec
                .get(0)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| AppError::Runtime(format!("{}: bad epoch column", path.display())))?;
            if e < epoch {
                rows.push(rec);
            }
        }
    }
    if rows.len() != epoch {
        return Err(AppError::Runtime(format!(
            "{} has {} rows before epoch {epoch}; cannot resume the log",
            path.display(),
            rows.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| AppError::Runtime(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for r in &rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Train `cfg.train.mode` on the dataset in `opts.data`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> AppResult<TrainOutcome> {
    cfg.validate()?;
    let ds = Dataset::open(&opts.data)?;
    ds.check_scales(cfg)?;
    let train_set = ds.load_split(Split::Train)?;
    let val_set = ds.load_split(Split::Val)?;
    if train_set.is_empty() {
        return Err(lmcascade_core::Error::EmptySplit("train").into());
    }
    if val_set.is_empty() {
        return Err(lmcascade_core::Error::EmptySplit("validation").into());
    }
    fs::create_dir_all(&opts.out).map_err(|e| AppError::io(&opts.out, e))?;

    let (mut trainer, mut best) = match &opts.resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.config.cascade != cfg.cascade || ck.config.schedule != cfg.schedule || ck.config.train != cfg.train {
                return Err(AppError::validation(
                    "train",
                    format!("{} was trained with a different configuration", p.display()),
                ));
            }
            (ck.trainer, ck.best)
        }
        None => (
            Trainer::new(cfg.train.clone(), cfg.cascade.clone(), cfg.schedule.clone())?,
            None,
        ),
    };

    let metrics = opts.out.join(METRICS);
    let head = header(trainer.weights(0).len());
    truncate_metrics(&metrics, trainer.epoch, &head)?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics)
        .map_err(|e| AppError::io(&metrics, e))?;

    let mut run = 0;
    let mut last_val = None;
    while !trainer.finished() && opts.stop_after.is_none_or(|k| run < k) {
        let ep = trainer.run_epoch(&train_set)?;
        let val = validation_error(&trainer.model, &trainer.cascade, &val_set)?;
        last_val = Some(val);
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(row(&ep, val)).expect("in-memory write");
        let bytes = w.into_inner().expect("in-memory flush");
        log.write_all(&bytes).map_err(|e| AppError::io(&metrics, e))?;
        log.flush().map_err(|e| AppError::io(&metrics, e))?;

        let improved = best.is_none_or(|b| val < b.val_error_mm);
        if improved {
            best = Some(Best {
                epoch: ep.epoch,
                val_error_mm: val,
            });
        }
        let ck = Checkpoint {
            config: cfg.clone(),
            trainer: trainer.clone(),
            best,
        };
        if improved {
            checkpoint::save(&ck, &opts.out.join(BEST))?;
        }
        checkpoint::save(&ck, &opts.out.join(LAST))?;
        if opts.verbose {
            eprintln!(
                "mode={} epoch={} train_loss={:.4} val_error_mm={:.3}",
                trainer.train.mode, ep.epoch, ep.train_loss, val
            );
        }
        run += 1;
    }
    Ok(TrainOutcome {
        epochs_run: run,
        next_epoch: trainer.epoch,
        last_val_error_mm: last_val,
        best,
    })
}
