//! Adam with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locnet::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of every parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }
}

/// One Adam update of `params` from `grads`. Nothing is modified when any
/// gradient is non-finite; the error names the first offending parameter.
pub fn adam_step(params: &mut [Param], grads: &[&[f32]], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "gradient of `{}` has {} elements",
                p.name,
                g.len()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data.iter_mut().enumerate() {
            let g = grads[i][j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let step = cfg.lr * (mj / c1) / (libm::sqrt(vj / c2) + cfg.eps);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}
