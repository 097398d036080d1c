//! Training engine: one Adam step per sample, seeded shuffling and noise.
//!
//! File handling (metrics log, checkpoints) lives in the std crate; this
//! module only owns the model, the optimizer state and the epoch counter.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    cascade_forward, cascade_loss, heatmap_target, loss_weights, register, single_scale_forward, Architecture,
    CascadeConfig, Model, NoiseMode, ScheduleConfig,
};
use crate::diffgraph::Graph;
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::phantom::LandmarkSample;
use crate::rng::{derive_seed, stream, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MultiscaleE2e,
    MultiscaleE2eNoise,
    MultiscaleMultistep,
    SingleScaleCom,
    SingleScaleHeatmap,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::MultiscaleE2eNoise,
        Mode::MultiscaleE2e,
        Mode::MultiscaleMultistep,
        Mode::SingleScaleCom,
        Mode::SingleScaleHeatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::MultiscaleE2e => "multiscale_e2e",
            Mode::MultiscaleE2eNoise => "multiscale_e2e_noise",
            Mode::MultiscaleMultistep => "multiscale_multistep",
            Mode::SingleScaleCom => "single_scale_com",
            Mode::SingleScaleHeatmap => "single_scale_heatmap",
        }
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Mode::SingleScaleCom => Architecture::SingleScaleCom,
            Mode::SingleScaleHeatmap => Architecture::SingleScaleHeatmap,
            _ => Architecture::Cascade,
        }
    }

    /// Whether test-time predictions average Monte-Carlo passes.
    pub fn uses_noise(self) -> bool {
        self == Mode::MultiscaleE2eNoise
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            lr: 5e-4,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mode: Mode::MultiscaleE2eNoise,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if self.batch_size != 1 {
            return Err(Error::config("train.batch_size", "only 1 is supported"));
        }
        for (k, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(k, "must be in [0, 1)"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be > 0"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Summary of one finished epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub weights: Vec<f64>,
    pub steps: usize,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub train: TrainConfig,
    pub cascade: CascadeConfig,
    pub schedule: ScheduleConfig,
    pub model: Model,
    pub adam: Vec<AdamState>,
    /// Next epoch to run.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(train: TrainConfig, cascade: CascadeConfig, schedule: ScheduleConfig) -> Result<Trainer> {
        train.validate()?;
        cascade.validate()?;
        schedule.validate(cascade.scales.len())?;
        let model = Model::build(
            train.mode.architecture(),
            &cascade,
            derive_seed(train.seed, stream::INIT, 0),
        )?;
        let adam = model.nets.iter().map(|n| AdamState::new(&n.params)).collect();
        Ok(Trainer {
            train,
            cascade,
            schedule,
            model,
            adam,
            epoch: 0,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.train.epochs
    }

    /// Stage of a multistep run: the scale being trained at `epoch`.
    pub fn stage(&self, epoch: usize) -> usize {
        let n = self.cascade.scales.len();
        (epoch * n / self.train.epochs).min(n - 1)
    }

    /// Loss weight per scale as logged for `epoch`.
    pub fn weights(&self, epoch: usize) -> Vec<f64> {
        let n = self.cascade.scales.len();
        match self.train.mode {
            Mode::MultiscaleE2e | Mode::MultiscaleE2eNoise => loss_weights(epoch, &self.schedule, n),
            Mode::MultiscaleMultistep => {
                let mut w = vec![0.0; n];
                w[self.stage(epoch)] = 1.0;
                w
            }
            Mode::SingleScaleCom | Mode::SingleScaleHeatmap => vec![1.0],
        }
    }

    /// Training order of `n` samples in `epoch`.
    pub fn order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(self.train.seed, stream::SHUFFLE, epoch as u64));
        idx
    }

    /// One Adam step on `sample`; returns the loss before the update.
    pub fn step(&mut self, sample: &LandmarkSample, epoch: usize, step: usize) -> Result<f64> {
        let mode = self.train.mode;
        let cfg = &self.cascade;
        let n = self.model.nets.len();
        let mut g = Graph::<f32>::new();
        let trainable: Vec<bool> = match mode {
            Mode::MultiscaleMultistep => (0..n).map(|s| s == self.stage(epoch)).collect(),
            _ => vec![true; n],
        };
        let handles = register(&mut g, &self.model, &trainable);
        let gt = &sample.landmarks;
        let loss = match mode {
            Mode::MultiscaleE2e | Mode::MultiscaleE2eNoise | Mode::MultiscaleMultistep => {
                let noise = if mode == Mode::MultiscaleE2eNoise {
                    let s = derive_seed(self.train.seed, stream::NOISE, epoch as u64);
                    NoiseMode::Random(derive_seed(s, step as u64, 0))
                } else {
                    NoiseMode::Off
                };
                let (detach, depth) = if mode == Mode::MultiscaleMultistep {
                    (true, self.stage(epoch) + 1)
                } else {
                    (false, n)
                };
                let out = cascade_forward(
                    &mut g,
                    &self.model,
                    &handles,
                    cfg,
                    &sample.pyramid,
                    &noise,
                    detach,
                    depth,
                )?;
                cascade_loss(&mut g, &out, gt, &self.weights(epoch))?
            }
            Mode::SingleScaleCom => {
                let (_, pts, _) = single_scale_forward(&mut g, &self.model, &handles, cfg, &sample.pyramid)?;
                let pts = pts.expect("center-of-mass head");
                let mut terms = Vec::with_capacity(gt.len());
                for (l, p) in gt.iter().enumerate() {
                    let pl = g.select_channel(pts, l)?;
                    let t = p.to_array().map(|v| v as f32);
                    let d = g.sq_dist(pl, &t)?;
                    terms.push((d, 1.0 / gt.len() as f32));
                }
                g.weighted_sum(&terms)?
            }
            Mode::SingleScaleHeatmap => {
                let (map, _, geom) = single_scale_forward(&mut g, &self.model, &handles, cfg, &sample.pyramid)?;
                let dims = g.shape(map).dims;
                let target = heatmap_target(geom, dims, gt, cfg.single_scale.heatmap_sigma)?;
                g.mse(map, target.shared_data().clone())?
            }
        };
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        g.backward(loss)?;
        let adam = self.train.adam();
        for (s, net) in self.model.nets.iter_mut().enumerate() {
            if !trainable[s] {
                continue;
            }
            let grads: Vec<&[f32]> = handles.nets[s]
                .iter()
                .map(|&id| g.grad(id).expect("trainable parameter has a gradient"))
                .collect();
            adam_step(&mut net.params, &grads, &mut self.adam[s], &adam).map_err(|e| match e {
                Error::NonFiniteGradient(p) => Error::NonFiniteGradient(format!("net{s}.{p}")),
                e => e,
            })?;
        }
        Ok(value)
    }

    /// Train one epoch over `train` in seeded order.
    pub fn run_epoch(&mut self, train: &[LandmarkSample]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        let epoch = self.epoch;
        let mut total = 0.0;
        let order = self.order(epoch, train.len());
        for (step, &i) in order.iter().enumerate() {
            total += self.step(&train[i], epoch, step)?;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            weights: self.weights(epoch),
            steps: train.len(),
        })
    }
}

/// Mean final-scale Euclidean error (mm) over all landmarks, noise off.
pub fn mean_error(model: &Model, cfg: &CascadeConfig, samples: &[LandmarkSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        total += sample_error_sum(model, cfg, s)?;
        n += s.landmarks.len();
    }
    Ok(total / n as f64)
}

/// Sum of final-scale errors over the landmarks of one sample, noise off.
pub fn sample_error_sum(model: &Model, cfg: &CascadeConfig, s: &LandmarkSample) -> Result<f64> {
    let pred = model.predict(cfg, &s.pyramid, &NoiseMode::Off)?;
    Ok(pred.iter().zip(&s.landmarks).map(|(p, q)| p.distance(*q)).sum())
}

#[cfg(test)]
mod tests;
