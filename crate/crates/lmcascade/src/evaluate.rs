//! Test-split evaluation: per-case error table and per-mode summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lmcascade_core::cascade::NoiseMode;
use lmcascade_core::eval::{confidence_volume, euclidean_error, mc_pass, summarize_passes, Summary};
use lmcascade_core::phantom::{LandmarkSample, Split};
use lmcascade_core::rng::{derive_seed, stream};
use lmcascade_core::train::Mode;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::stats::{pearson, Pearson};
use crate::{AppError, AppResult, FORMAT_VERSION};

pub const REPORT: &str = "report.csv";
pub const SUMMARY: &str = "summary.json";
/// How cases are pooled for the correlation analysis.
pub const POOLING: &str = "per_landmark_cases";

/// A `--ckpt` argument: `PATH` or `MODE=PATH`; a directory means its
/// `best.ckpt`.
#[derive(Debug, Clone, PartialEq)]
pub struct CkptArg {
    pub mode: Option<Mode>,
    pub path: PathBuf,
}

impl std::str::FromStr for CkptArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if let Some((m, p)) = s.split_once('=') {
            if let Ok(mode) = m.parse::<Mode>() {
                return Ok(CkptArg {
                    mode: Some(mode),
                    path: PathBuf::from(p),
                });
            }
        }
        Ok(CkptArg {
            mode: None,
            path: PathBuf::from(s),
        })
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub data: PathBuf,
    pub ckpts: Vec<CkptArg>,
    pub mc: usize,
    pub out: PathBuf,
    /// Base seed of the Monte-Carlo streams.
    pub seed: u64,
    pub single_pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub landmark: usize,
    pub mode: Mode,
    pub error_mm: f64,
    pub sigma_mm: Option<[f64; 3]>,
    pub conf_vol_mm3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub checkpoint: String,
    pub prediction: String,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub n: usize,
    pub pearson: Option<Pearson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub version: u32,
    pub test_samples: usize,
    pub mc_passes: usize,
    pub confidence_level: f64,
    pub pooling: String,
    pub modes: BTreeMap<String, ModeSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cases: Vec<Case>,
    pub summary: SummaryFile,
}

fn resolve(arg: &CkptArg) -> AppResult<(PathBuf, Checkpoint)> {
    let path = if arg.path.is_dir() {
        arg.path.join(crate::training::BEST)
    } else {
        arg.path.clone()
    };
    if !path.exists() {
        let what = arg.mode.map_or_else(String::new, |m| format!(" for mode {m}"));
        return Err(AppError::Runtime(format!(
            "missing checkpoint{what}: {}",
            path.display()
        )));
    }
    let ck = checkpoint::load(&path)?;
    if let Some(m) = arg.mode {
        if m != ck.mode() {
            return Err(AppError::validation(
                "ckpt",
                format!("{} holds mode {}, not {m}", path.display(), ck.mode()),
            ));
        }
    }
    Ok((path, ck))
}

/// Cases of one checkpoint over `test`, in sample then landmark order.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    test: &[LandmarkSample],
    mc: usize,
    seed: u64,
    single_pass: bool,
    level: f64,
) -> AppResult<Vec<Case>> {
    let mode = ck.mode();
    let cfg = &ck.config.cascade;
    let model = ck.model();
    let mc_mode = mode.uses_noise() && mc >= 2;
    let per_sample: Vec<Vec<Case>> = if mc_mode {
        let jobs: Vec<(usize, usize)> = (0..test.len()).flat_map(|i| (0..mc).map(move |p| (i, p))).collect();
        let passes = jobs
            .par_iter()
            .map(|&(i, p)| mc_pass(model, cfg, &test[i].pyramid, derive_seed(seed, stream::MC, i as u64), p))
            .collect::<Result<Vec<_>, _>>()?;
        test.iter()
            .enumerate()
            .map(|(i, s)| -> AppResult<Vec<Case>> {
                let unc = summarize_passes(&passes[i * mc..(i + 1) * mc])?;
                let points = if single_pass {
                    model.predict(cfg, &s.pyramid, &NoiseMode::Off)?
                } else {
                    unc.iter().map(|u| u.mean).collect()
                };
                unc.iter()
                    .zip(&points)
                    .zip(&s.landmarks)
                    .enumerate()
                    .map(|(l, ((u, p), gt))| {
                        Ok(Case {
                            id: s.id.clone(),
                            landmark: l,
                            mode,
                            error_mm: euclidean_error(*p, *gt),
                            sigma_mm: Some(u.std),
                            conf_vol_mm3: Some(confidence_volume(u.std, level)?),
                        })
                    })
                    .collect()
            })
            .collect::<AppResult<Vec<_>>>()?
    } else {
        test.par_iter()
            .map(|s| -> AppResult<Vec<Case>> {
                let points = model.predict(cfg, &s.pyramid, &NoiseMode::Off)?;
                Ok(points
                    .iter()
                    .zip(&s.landmarks)
                    .enumerate()
                    .map(|(l, (p, gt))| Case {
                        id: s.id.clone(),
                        landmark: l,
                        mode,
                        error_mm: euclidean_error(*p, *gt),
                        sigma_mm: None,
                        conf_vol_mm3: None,
                    })
                    .collect())
            })
            .collect::<AppResult<Vec<_>>>()?
    };
    Ok(per_sample.into_iter().flatten().collect())
}

fn summarize(cases: &[Case], checkpoint: &Path, prediction: &str) -> AppResult<ModeSummary> {
    let errors: Vec<f64> = cases.iter().map(|c| c.error_mm).collect();
    let s = Summary::of(&errors)?;
    let vols: Vec<f64> = cases.iter().filter_map(|c| c.conf_vol_mm3).collect();
    let pearson = if vols.len() == errors.len() && vols.len() >= 3 {
        pearson(&vols, &errors).ok()
    } else {
        None
    };
    Ok(ModeSummary {
        checkpoint: checkpoint.display().to_string(),
        prediction: prediction.into(),
        mean: s.mean,
        std: s.std,
        median: s.median,
        q25: s.q25,
        q75: s.q75,
        n: s.n,
        pearson,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_report(path: &Path, cases: &[Case]) -> AppResult<()> {
    let err = |e: csv::Error| AppError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record([
        "id",
        "landmark",
        "mode",
        "error_mm",
        "sigma_x_mm",
        "sigma_y_mm",
        "sigma_z_mm",
        "conf_vol_mm3",
    ])
    .map_err(err)?;
    for c in cases {
        let s = c.sigma_mm;
        w.write_record([
            c.id.clone(),
            c.landmark.to_string(),
            c.mode.to_string(),
            c.error_mm.to_string(),
            opt(s.map(|s| s[0])),
            opt(s.map(|s| s[1])),
            opt(s.map(|s| s[2])),
            opt(c.conf_vol_mm3),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Evaluate every checkpoint on the test split and write `report.csv` and
/// `summary.json` into `opts.out`.
pub fn evaluate(cfg: &RunConfig, opts: &EvalOptions) -> AppResult<EvalReport> {
    if opts.ckpts.is_empty() {
        return Err(AppError::Usage("eval needs at least one --ckpt".into()));
    }
    if opts.mc < 2 {
        return Err(AppError::validation("eval.mc_passes", "must be >= 2"));
    }
    let ds = Dataset::open(&opts.data)?;
    let test = ds.load_split(Split::Test)?;
    if test.is_empty() {
        return Err(lmcascade_core::Error::EmptySplit("test").into());
    }
    let mut cases = Vec::new();
    let mut modes = BTreeMap::new();
    for arg in &opts.ckpts {
        let (path, ck) = resolve(arg)?;
        ds.check_scales(&ck.config)?;
        let mode = ck.mode();
        if modes.contains_key(mode.name()) {
            return Err(AppError::Usage(format!("mode {mode} given twice")));
        }
        let c = evaluate_checkpoint(
            &ck,
            &test,
            opts.mc,
            opts.seed,
            opts.single_pass,
            cfg.eval.confidence_level,
        )?;
        let prediction = if mode.uses_noise() && !opts.single_pass {
            "mc_mean"
        } else {
            "single_pass"
        };
        modes.insert(mode.name().to_string(), summarize(&c, &path, prediction)?);
        cases.extend(c);
    }
    fs::create_dir_all(&opts.out).map_err(|e| AppError::io(&opts.out, e))?;
    write_report(&opts.out.join(REPORT), &cases)?;
    let summary = SummaryFile {
        version: FORMAT_VERSION,
        test_samples: test.len(),
        mc_passes: opts.mc,
        confidence_level: cfg.eval.confidence_level,
        pooling: POOLING.into(),
        modes,
    };
    let sp = opts.out.join(SUMMARY);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&sp, json + "\n").map_err(|e| AppError::io(&sp, e))?;
    Ok(EvalReport { cases, summary })
}
