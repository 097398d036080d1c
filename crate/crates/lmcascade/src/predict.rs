//! Single-volume prediction from a checkpoint.

use std::path::Path;

use lmcascade_core::cascade::NoiseMode;
use lmcascade_core::eval::{confidence_volume, mc_predict};
use lmcascade_core::phantom::build_pyramid;
use serde::Serialize;

use crate::checkpoint;
use crate::volio::read_volume;
use crate::AppResult;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandmarkPrediction {
    pub mean_mm: [f64; 3],
    pub std_mm: [f64; 3],
    pub conf_vol_mm3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub mode: String,
    pub n_passes: usize,
    pub landmarks: Vec<LandmarkPrediction>,
}

/// Predict the landmarks of the base-resolution volume at `volume`; with
/// `mc >= 2`, average that many noisy passes.
pub fn predict(ckpt: &Path, volume: &Path, mc: Option<usize>, seed: u64) -> AppResult<Prediction> {
    let ck = checkpoint::load(ckpt)?;
    let cfg = &ck.config.cascade;
    let vol = read_volume(volume)?;
    let pyramid = build_pyramid(&vol, &cfg.scales)?;
    let level = ck.config.eval.confidence_level;
    let landmarks = match mc {
        Some(n) if n >= 2 => mc_predict(ck.model(), cfg, &pyramid, n, seed)?
            .into_iter()
            .map(|u| {
                Ok(LandmarkPrediction {
                    mean_mm: u.mean.to_array(),
                    std_mm: u.std,
                    conf_vol_mm3: confidence_volume(u.std, level)?,
                })
            })
            .collect::<AppResult<Vec<_>>>()?,
        Some(n) => {
            return Err(crate::AppError::validation(
                "mc",
                format!("needs at least 2 passes, got {n}"),
            ));
        }
        None => ck
            .model()
            .predict(cfg, &pyramid, &NoiseMode::Off)?
            .into_iter()
            .map(|p| LandmarkPrediction {
                mean_mm: p.to_array(),
                std_mm: [0.0; 3],
                conf_vol_mm3: 0.0,
            })
            .collect(),
    };
    Ok(Prediction {
        mode: ck.mode().to_string(),
        n_passes: mc.unwrap_or(1),
        landmarks,
    })
}
