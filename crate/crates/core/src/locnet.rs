//! Localizer network: a 3D U-Net style encoder/decoder whose output is read
//! out as landmark coordinates by a spatial softmax and a center-of-mass
//! layer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Geometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocNetConfig {
    /// Number of 2x pooling steps.
    pub depth: usize,
    /// Channels at full resolution, doubled at every encoder level.
    pub base_channels: usize,
    pub kernel: usize,
    /// Softmax temperature of the readout.
    pub temperature: f64,
}

impl Default for LocNetConfig {
    fn default() -> Self {
        LocNetConfig {
            depth: 3,
            base_channels: 8,
            kernel: 3,
            temperature: 1.0,
        }
    }
}

impl LocNetConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config(format!("{key}.depth"), "must be >= 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config(format!("{key}.base_channels"), "must be >= 1"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("{key}.kernel"), "must be odd"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config(format!("{key}.temperature"), "must be > 0"));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let m = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % m != 0) {
            return Err(Error::Shape(format!(
                "input dims {dims:?} must be divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }

    /// Output channels of each encoder level, finest first.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_channels << i).collect()
    }
}

/// One named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

/// How the backbone output is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Spatial softmax followed by center of mass.
    CenterOfMass,
    /// Raw backbone output, regressed against a heatmap target.
    Heatmap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocNetParams {
    pub config: LocNetConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    pub params: Vec<Param>,
}

struct LayerSpec {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
}

fn layer_specs(cfg: &LocNetConfig, in_channels: usize, out_channels: usize) -> Vec<LayerSpec> {
    let k = cfg.kernel;
    let ch = cfg.encoder_channels();
    let mut specs = Vec::new();
    let mut push = |name: String, cin, cout, k| specs.push(LayerSpec { name, cin, cout, k });
    let mut cin = in_channels;
    for (i, &c) in ch.iter().enumerate() {
        push(format!("enc{i}.conv1"), cin, c, k);
        push(format!("enc{i}.conv2"), c, c, k);
        cin = c;
    }
    let bottom = ch[ch.len() - 1];
    push("bottleneck.conv1".into(), cin, bottom, k);
    push("bottleneck.conv2".into(), bottom, bottom, k);
    let mut below = bottom;
    for i in (0..ch.len()).rev() {
        push(format!("dec{i}.conv1"), below + ch[i], ch[i], k);
        push(format!("dec{i}.conv2"), ch[i], ch[i], k);
        below = ch[i];
    }
    push("head".into(), ch[0], out_channels, 1);
    specs
}

/// He-initialized parameters: weights `N(0, sqrt(2 / fan_in))`, zero biases.
pub fn build_locnet(cfg: &LocNetConfig, in_channels: usize, out_channels: usize, seed: u64) -> Result<LocNetParams> {
    cfg.validate("locnet")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for l in layer_specs(cfg, in_channels, out_channels) {
        let fan_in = (l.cin * l.k * l.k * l.k) as f64;
        let normal =
            Normal::new(0.0f64, libm::sqrt(2.0 / fan_in)).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
        let wshape = Shape::new(l.cout * l.cin, [l.k; 3]);
        let w = (0..wshape.len()).map(|_| normal.sample(&mut rng) as f32).collect();
        params.push(Param {
            name: format!("{}.weight", l.name),
            shape: wshape,
            data: w,
        });
        params.push(Param {
            name: format!("{}.bias", l.name),
            shape: Shape::new(l.cout, [1, 1, 1]),
            data: alloc::vec![0.0; l.cout],
        });
    }
    Ok(LocNetParams {
        config: *cfg,
        in_channels,
        out_channels,
        params,
    })
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LocNetOutput {
    /// Backbone output before any readout, `(out_channels, n)`.
    pub logits: NodeId,
    /// Softmax weights for the center-of-mass head, raw logits otherwise.
    pub heatmap: NodeId,
    /// `(out_channels, 3, 1, 1)` world coordinates for the center-of-mass head.
    pub points: Option<NodeId>,
}

impl LocNetParams {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Put every parameter on the graph, trainable or frozen.
    pub fn register<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                let t = Tensor::new(p.shape, p.data.iter().map(|&v| T::of(v as f64)).collect())
                    .expect("param buffer matches its shape");
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    /// Run the network on `input` (shape `(in_channels, n)`) whose voxel
    /// grid has world geometry `geometry`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ids: &[NodeId],
        input: NodeId,
        geometry: Geometry,
        head: Head,
    ) -> Result<LocNetOutput> {
        let cfg = &self.config;
        let s = g.shape(input);
        if s.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "locnet expects {} input channels, got {}",
                self.in_channels, s.channels
            )));
        }
        cfg.check_input(s.dims)?;
        if ids.len() != self.params.len() {
            return Err(Error::Shape("parameter handles do not match the network".into()));
        }
        let pad = cfg.kernel / 2;
        let mut next = ids.chunks_exact(2);
        let mut conv_relu = |g: &mut Graph<T>, x: NodeId| -> Result<NodeId> {
            let wb = next.next().expect("layer list matches forward");
            let y = g.conv3d(x, wb[0], wb[1], 1, pad)?;
            Ok(g.relu(y))
        };

        let mut skips = Vec::with_capacity(cfg.depth);
        let mut x = input;
        for _ in 0..cfg.depth {
            x = conv_relu(g, x)?;
            x = conv_relu(g, x)?;
            skips.push(x);
            x = g.maxpool2(x)?;
        }
        x = conv_relu(g, x)?;
        x = conv_relu(g, x)?;
        for skip in skips.into_iter().rev() {
            let up = g.upsample2(x);
            x = g.concat_channels(up, skip)?;
            x = conv_relu(g, x)?;
            x = conv_relu(g, x)?;
        }
        let wb = next.next().expect("head layer");
        let logits = g.conv3d(x, wb[0], wb[1], 1, 0)?;
        match head {
            Head::Heatmap => Ok(LocNetOutput {
                logits,
                heatmap: logits,
                points: None,
            }),
            Head::CenterOfMass => {
                let heatmap = g.spatial_softmax(logits, T::of(cfg.temperature))?;
                let points = g.center_of_mass(heatmap, geometry)?;
                Ok(LocNetOutput {
                    logits,
                    heatmap,
                    points: Some(points),
                })
            }
        }
    }
}
