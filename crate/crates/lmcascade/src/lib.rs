//! File formats, training driver, evaluation and command line for
//! [`lmcascade_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod peak_alloc;
pub mod predict;
pub mod stats;
pub mod training;
pub mod volio;

pub use error::{AppError, AppResult};
pub use lmcascade_core as core;

/// Version of the config, manifest and checkpoint formats.
pub const FORMAT_VERSION: u32 = 1;

#[cfg(test)]
pub(crate) mod testutil {
    use lmcascade_core::locnet::LocNetConfig;

    use crate::config::RunConfig;

    /// A configuration small enough for unit tests: 32 mm phantoms on a
    /// 1 mm grid, three scales, 8^3 patches.
    pub fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.phantom.extent_mm = [32.0; 3];
        c.phantom.base_spacing = 1.0;
        c.phantom.jitter_mm = 2.0;
        c.phantom.junction_offset_mm = 4.0;
        let net = LocNetConfig {
            depth: 1,
            base_channels: 2,
            kernel: 3,
            temperature: 1.0,
        };
        c.cascade.scales = vec![4.0, 2.0, 1.0];
        c.cascade.patch_dims = [8; 3];
        c.cascade.locnet = vec![net; 3];
        c.cascade.single_scale.spacing = 2.0;
        c.cascade.single_scale.locnet = net;
        c.cascade.noise_amplitude = 1.5;
        c.dataset.n = 4;
        c.dataset.split = [2, 1, 1];
        c.train.epochs = 2;
        c.schedule.total_epochs = 2;
        c.eval.mc_passes = 4;
        c
    }
}
