//! Pearson correlation with a two-sided t-test p-value.

use lmcascade_core::eval::pearson_r;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{AppError, AppResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

/// Sample correlation of `x` and `y`; `p` from Student's t with `n - 2`
/// degrees of freedom, `t = r sqrt((n - 2) / (1 - r^2))`.
pub fn pearson(x: &[f64], y: &[f64]) -> AppResult<Pearson> {
    let r = pearson_r(x, y)?;
    let n = x.len();
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| AppError::Runtime(e.to_string()))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Pearson { r, p, n })
}
