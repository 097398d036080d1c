//! Error metrics, Monte-Carlo uncertainty and correlation.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, Model, NoiseMode};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::volume::{Volume, WorldPoint};

/// 0.9 quantile of the chi-square distribution with 3 degrees of freedom.
pub const CHI2_3_P90: f64 = 6.2514;

pub fn euclidean_error(pred: WorldPoint, gt: WorldPoint) -> f64 {
    pred.distance(gt)
}

/// Distribution summary of a set of errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub n: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    /// Summary with the unbiased standard deviation (0 for a single value).
    /// Values are sorted first, so the result does not depend on input order.
    pub fn of(values: &[f64]) -> Result<Summary> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("summary of no values".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("summary input"));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Ok(Summary {
            mean,
            std: libm::sqrt(var),
            median: quantile_sorted(&s, 0.5),
            q25: quantile_sorted(&s, 0.25),
            q75: quantile_sorted(&s, 0.75),
            n,
        })
    }
}

/// Chi-square CDF with 3 degrees of freedom.
pub fn chi2_3_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    libm::erf(libm::sqrt(x / 2.0)) - libm::sqrt(2.0 * x / core::f64::consts::PI) * libm::exp(-x / 2.0)
}

/// Quantile of the chi-square distribution with 3 degrees of freedom.
pub fn chi2_3_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level {level} not in (0, 1)"
        )));
    }
    if level == 0.9 {
        return Ok(CHI2_3_P90);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while chi2_3_cdf(hi) < level {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_3_cdf(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Volume (mm^3) of the `level` probability ellipsoid of an axis-aligned
/// Gaussian with per-axis standard deviations `std`.
pub fn confidence_volume(std: [f64; 3], level: f64) -> Result<f64> {
    if std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "standard deviations {std:?} must be >= 0"
        )));
    }
    let k = chi2_3_quantile(level)?;
    Ok(4.0 / 3.0 * core::f64::consts::PI * std[0] * std[1] * std[2] * libm::pow(k, 1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionWithUncertainty {
    pub mean: WorldPoint,
    pub std: [f64; 3],
    pub confidence_volume: f64,
    pub n_passes: usize,
}

/// Seed of Monte-Carlo pass `pass`.
pub fn pass_seed(base_seed: u64, pass: usize) -> u64 {
    derive_seed(base_seed, stream::MC, pass as u64)
}

/// Final-scale predictions of one noisy pass.
pub fn mc_pass(
    model: &Model,
    cfg: &CascadeConfig,
    pyramid: &[Volume],
    base_seed: u64,
    pass: usize,
) -> Result<Vec<WorldPoint>> {
    model.predict(cfg, pyramid, &NoiseMode::Random(pass_seed(base_seed, pass)))
}

/// Per-landmark mean, unbiased std and 90% confidence volume of
/// `passes[p][l]`. Invariant under reordering of the passes.
pub fn summarize_passes(passes: &[Vec<WorldPoint>]) -> Result<Vec<PredictionWithUncertainty>> {
    let n = passes.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("{n} passes, need at least 2")));
    }
    let k = passes[0].len();
    if passes.iter().any(|p| p.len() != k) {
        return Err(Error::Shape("passes disagree on the landmark count".into()));
    }
    (0..k)
        .map(|l| {
            let mut mean = [0.0; 3];
            let mut std = [0.0; 3];
            for d in 0..3 {
                let mut v: Vec<f64> = passes.iter().map(|p| p[l].to_array()[d]).collect();
                v.sort_by(f64::total_cmp);
                let m = v.iter().sum::<f64>() / n as f64;
                let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
                mean[d] = m;
                std[d] = libm::sqrt(var);
            }
            Ok(PredictionWithUncertainty {
                mean: WorldPoint::from_array(mean),
                std,
                confidence_volume: confidence_volume(std, 0.9)?,
                n_passes: n,
            })
        })
        .collect()
}

/// `n` noisy passes summarized per landmark; deterministic given `base_seed`.
pub fn mc_predict(
    model: &Model,
    cfg: &CascadeConfig,
    pyramid: &[Volume],
    n: usize,
    base_seed: u64,
) -> Result<Vec<PredictionWithUncertainty>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("mc_predict needs n >= 2, got {n}")));
    }
    let passes = (0..n)
        .map(|p| mc_pass(model, cfg, pyramid, base_seed, p))
        .collect::<Result<Vec<_>>>()?;
    summarize_passes(&passes)
}

/// Sample Pearson correlation coefficient, clamped to [-1, 1].
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} x values, {} y values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument("correlation needs at least 3 pairs".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation of a constant series".into()));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}
