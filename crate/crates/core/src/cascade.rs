//! Coarse-to-fine cascade of localizer networks.
//!
//! Scale 0 sees the whole coarsest volume. Every finer scale crops a patch
//! around the previous prediction (one patch per landmark) with the
//! differentiable crop-and-resample layer and predicts an offset from the
//! patch center. Because the crop center stays on the graph, a loss on a
//! fine scale also trains the coarser networks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{CropSpec, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::locnet::{build_locnet, Head, LocNetConfig, LocNetParams};
use crate::real::Real;
use crate::rng::{derive_seed, stream_rng};
use crate::volume::{Geometry, Volume, WorldPoint};

/// Which crops receive the random shift when noise is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScope {
    #[default]
    Finest,
    AllCrops,
}

/// Settings of the single-scale baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingleScaleConfig {
    /// Pyramid level (mm) the single-scale models see in full.
    pub spacing: f64,
    pub locnet: LocNetConfig,
    /// Standard deviation of the Gaussian heatmap target (mm).
    pub heatmap_sigma: f64,
}

impl Default for SingleScaleConfig {
    fn default() -> Self {
        SingleScaleConfig {
            spacing: 1.0,
            locnet: LocNetConfig::default(),
            heatmap_sigma: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Voxel spacing per scale (mm), coarsest first.
    pub scales: Vec<f64>,
    pub patch_dims: [usize; 3],
    /// Half-width of the uniform crop-center shift (mm).
    pub noise_amplitude: f64,
    pub noise_scope: NoiseScope,
    /// Fine networks emit one channel shared by all landmarks instead of one
    /// channel per landmark.
    pub share_fine_weights: bool,
    /// Value read outside the source volume when cropping.
    pub fill: f64,
    pub landmarks: usize,
    /// One network configuration per scale.
    pub locnet: Vec<LocNetConfig>,
    pub single_scale: SingleScaleConfig,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            scales: vec![4.0, 2.0, 1.0, 0.5],
            patch_dims: [56; 3],
            noise_amplitude: 5.0,
            noise_scope: NoiseScope::Finest,
            share_fine_weights: false,
            fill: 0.0,
            landmarks: 2,
            locnet: vec![LocNetConfig::default(); 4],
            single_scale: SingleScaleConfig::default(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("cascade.scales", "must not be empty"));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("cascade.scales", "spacings must be finite and > 0"));
        }
        if self.scales.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("cascade.scales", "must be strictly decreasing"));
        }
        if self.locnet.len() != self.scales.len() {
            return Err(Error::config(
                "cascade.locnet",
                format!(
                    "needs one entry per scale ({}), got {}",
                    self.scales.len(),
                    self.locnet.len()
                ),
            ));
        }
        for (s, cfg) in self.locnet.iter().enumerate() {
            cfg.validate(&format!("cascade.locnet[{s}]"))?;
            if self.patch_dims.iter().any(|&n| n == 0 || n % cfg.divisor() != 0) {
                return Err(Error::config(
                    "cascade.patch_dims",
                    format!("must be divisible by 2^depth = {} of scale {s}", cfg.divisor()),
                ));
            }
        }
        if !(self.noise_amplitude.is_finite() && self.noise_amplitude >= 0.0) {
            return Err(Error::config("cascade.noise_amplitude", "must be >= 0"));
        }
        if !self.fill.is_finite() {
            return Err(Error::config("cascade.fill", "must be finite"));
        }
        if self.landmarks == 0 {
            return Err(Error::config("cascade.landmarks", "must be >= 1"));
        }
        self.single_scale.locnet.validate("cascade.single_scale.locnet")?;
        if !(self.single_scale.heatmap_sigma.is_finite() && self.single_scale.heatmap_sigma > 0.0) {
            return Err(Error::config("cascade.single_scale.heatmap_sigma", "must be > 0"));
        }
        if self.single_scale_level().is_none() {
            return Err(Error::config(
                "cascade.single_scale.spacing",
                "must equal one of cascade.scales",
            ));
        }
        Ok(())
    }

    /// Index of the pyramid level used by the single-scale baselines.
    pub fn single_scale_level(&self) -> Option<usize> {
        self.scales
            .iter()
            .position(|&s| (s - self.single_scale.spacing).abs() <= 1e-9 * s)
    }

    pub fn finest(&self) -> usize {
        self.scales.len() - 1
    }

    fn noisy(&self, scale: usize) -> bool {
        scale > 0
            && match self.noise_scope {
                NoiseScope::Finest => scale == self.finest(),
                NoiseScope::AllCrops => true,
            }
    }

    fn crop_spec(&self, scale: usize, src: Geometry) -> CropSpec {
        CropSpec {
            src,
            out_dims: self.patch_dims,
            out_spacing: [self.scales[scale]; 3],
            fill: self.fill,
        }
    }
}

/// Piecewise-linear loss weights per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_epochs: usize,
    /// Peak of the intermediate scales, reached at mid-training.
    pub middle_peak: f64,
    /// Explicit `(epoch, weight)` breakpoints per scale; derived from
    /// `total_epochs` and `middle_peak` when absent.
    pub breakpoints: Option<Vec<Vec<(f64, f64)>>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            total_epochs: 500,
            middle_peak: 1.0,
            breakpoints: None,
        }
    }
}

impl ScheduleConfig {
    /// Breakpoints for `n` scales: the coarsest weight falls 1 -> 0, the
    /// finest rises 0 -> 1, and the others rise to `middle_peak` at the
    /// midpoint and fall back to 0.
    pub fn resolved(&self, n: usize) -> Vec<Vec<(f64, f64)>> {
        if let Some(b) = &self.breakpoints {
            return b.clone();
        }
        let e = self.total_epochs as f64;
        (0..n)
            .map(|s| {
                if n == 1 {
                    vec![(0.0, 1.0)]
                } else if s == 0 {
                    vec![(0.0, 1.0), (e, 0.0)]
                } else if s == n - 1 {
                    vec![(0.0, 0.0), (e, 1.0)]
                } else {
                    vec![(0.0, 0.0), (e / 2.0, self.middle_peak), (e, 0.0)]
                }
            })
            .collect()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::config("schedule.total_epochs", "must be >= 1"));
        }
        if !(self.middle_peak.is_finite() && self.middle_peak >= 0.0) {
            return Err(Error::config("schedule.middle_peak", "must be >= 0"));
        }
        let bps = self.resolved(n);
        if bps.len() != n {
            return Err(Error::config(
                "schedule.breakpoints",
                format!("needs one list per scale ({n}), got {}", bps.len()),
            ));
        }
        for (s, b) in bps.iter().enumerate() {
            if b.is_empty() {
                return Err(Error::config(format!("schedule.breakpoints[{s}]"), "must not be empty"));
            }
            if b.iter().any(|&(e, w)| !(e.is_finite() && w.is_finite() && w >= 0.0)) {
                return Err(Error::config(
                    format!("schedule.breakpoints[{s}]"),
                    "weights must be >= 0",
                ));
            }
            if b.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::config(
                    format!("schedule.breakpoints[{s}]"),
                    "epochs must be strictly increasing",
                ));
            }
        }
        for epoch in 0..=self.total_epochs {
            if loss_weights(epoch, self, n).iter().all(|&w| w <= 0.0) {
                return Err(Error::config(
                    "schedule.breakpoints",
                    format!("all weights vanish at epoch {epoch}"),
                ));
            }
        }
        Ok(())
    }
}

fn interpolate(b: &[(f64, f64)], x: f64) -> f64 {
    if x <= b[0].0 {
        return b[0].1;
    }
    for w in b.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            // Convex form so the endpoints are hit exactly.
            let t = (x - x0) / (x1 - x0);
            return y0 * (1.0 - t) + y1 * t;
        }
    }
    b[b.len() - 1].1
}

/// Loss weight of every scale at `epoch`; constant within an epoch and
/// clamped to the final values past the last breakpoint.
pub fn loss_weights(epoch: usize, sched: &ScheduleConfig, n_scales: usize) -> Vec<f64> {
    let x = (epoch as f64).min(sched.total_epochs as f64);
    sched.resolved(n_scales).iter().map(|b| interpolate(b, x)).collect()
}

/// Crop-center perturbation for one cascade pass.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseMode {
    Off,
    /// Uniform shifts of `noise_amplitude` drawn from this seed.
    Random(u64),
    /// Explicit shift (mm) per landmark.
    Fixed(Vec<[f64; 3]>),
}

impl NoiseMode {
    /// Shift (mm) applied to the crop of `landmark` at `scale`, if any.
    pub fn offset(&self, cfg: &CascadeConfig, scale: usize, landmark: usize) -> Option<[f64; 3]> {
        if !cfg.noisy(scale) {
            return None;
        }
        match self {
            NoiseMode::Off => None,
            NoiseMode::Fixed(v) => v.get(landmark).copied(),
            &NoiseMode::Random(seed) => {
                let a = cfg.noise_amplitude;
                if a == 0.0 {
                    return Some([0.0; 3]);
                }
                let mut rng = stream_rng(seed, scale as u64, landmark as u64);
                Some(core::array::from_fn(|_| rng.random_range(-a..=a)))
            }
        }
    }
}

/// Network family of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Cascade,
    SingleScaleCom,
    SingleScaleHeatmap,
}

/// Trained (or freshly initialized) networks of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub architecture: Architecture,
    pub landmarks: usize,
    pub nets: Vec<LocNetParams>,
}

impl Model {
    pub fn build(architecture: Architecture, cfg: &CascadeConfig, seed: u64) -> Result<Model> {
        let k = cfg.landmarks;
        let nets = match architecture {
            Architecture::Cascade => (0..cfg.scales.len())
                .map(|s| {
                    let out = if s > 0 && cfg.share_fine_weights { 1 } else { k };
                    build_locnet(&cfg.locnet[s], 1, out, derive_seed(seed, s as u64, 0))
                })
                .collect::<Result<Vec<_>>>()?,
            Architecture::SingleScaleCom | Architecture::SingleScaleHeatmap => {
                vec![build_locnet(&cfg.single_scale.locnet, 1, k, derive_seed(seed, 0, 0))?]
            }
        };
        Ok(Model {
            architecture,
            landmarks: k,
            nets,
        })
    }
}

/// Per-scale graph handles of one cascade pass.
#[derive(Debug, Clone)]
pub struct CascadeOutput {
    /// `points[s][l]`: world prediction of landmark `l` at scale `s`, a
    /// three-element node.
    pub points: Vec<Vec<NodeId>>,
    /// `heatmaps[s][l]`: single-channel softmax map behind `points[s][l]`.
    pub heatmaps: Vec<Vec<NodeId>>,
    /// `crop_centers[s][l]`: world center of the patch seen at scale `s`.
    pub crop_centers: Vec<Vec<WorldPoint>>,
    /// Geometry of every heatmap.
    pub geometries: Vec<Vec<Geometry>>,
}

impl CascadeOutput {
    pub fn final_points<T: Real>(&self, g: &Graph<T>) -> Vec<WorldPoint> {
        self.points_at(g, self.points.len() - 1)
    }

    pub fn points_at<T: Real>(&self, g: &Graph<T>, scale: usize) -> Vec<WorldPoint> {
        self.points[scale].iter().map(|&id| node_point(g, id)).collect()
    }
}

pub fn node_point<T: Real>(g: &Graph<T>, id: NodeId) -> WorldPoint {
    let v = g.value(id).data();
    WorldPoint::new(v[0].as_f64(), v[1].as_f64(), v[2].as_f64())
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0)
}

/// Check that `pyramid` matches the scales and shares one world frame.
pub fn check_pyramid(cfg: &CascadeConfig, pyramid: &[Volume]) -> Result<()> {
    if pyramid.len() != cfg.scales.len() {
        return Err(Error::Geometry(format!(
            "pyramid has {} levels, cascade has {} scales",
            pyramid.len(),
            cfg.scales.len()
        )));
    }
    let lo0: [f64; 3] = core::array::from_fn(|d| pyramid[0].origin()[d] - pyramid[0].spacing()[d] / 2.0);
    let ext0 = pyramid[0].extent();
    for (s, vol) in pyramid.iter().enumerate() {
        if vol.channels() != 1 {
            return Err(Error::Shape(format!(
                "pyramid level {s} has {} channels",
                vol.channels()
            )));
        }
        for d in 0..3 {
            if !same(vol.spacing()[d], cfg.scales[s]) {
                return Err(Error::Geometry(format!(
                    "pyramid level {s} spacing {:?} does not match scale {}",
                    vol.spacing(),
                    cfg.scales[s]
                )));
            }
            let lo = vol.origin()[d] - vol.spacing()[d] / 2.0;
            if !same(lo, lo0[d]) || !same(vol.extent()[d], ext0[d]) {
                return Err(Error::Geometry(format!(
                    "pyramid level {s} does not share the world frame of level 0"
                )));
            }
        }
    }
    Ok(())
}

/// Registered graph handles of a model's networks.
pub struct Handles {
    pub nets: Vec<Vec<NodeId>>,
}

/// Put the model on the graph; `trainable[s]` selects which networks get
/// gradients.
pub fn register<T: Real>(g: &mut Graph<T>, model: &Model, trainable: &[bool]) -> Handles {
    Handles {
        nets: model
            .nets
            .iter()
            .enumerate()
            .map(|(s, p)| p.register(g, trainable.get(s).copied().unwrap_or(false)))
            .collect(),
    }
}

/// One pass of the cascade.
///
/// `depth` limits the pass to the first `depth` scales. With
/// `detach_centers`, crop centers enter the graph as constants, which cuts
/// the learning signal between scales.
#[allow(clippy::too_many_arguments)]
pub fn cascade_forward<T: Real>(
    g: &mut Graph<T>,
    model: &Model,
    handles: &Handles,
    cfg: &CascadeConfig,
    pyramid: &[Volume],
    noise: &NoiseMode,
    detach_centers: bool,
    depth: usize,
) -> Result<CascadeOutput> {
    if model.architecture != Architecture::Cascade {
        return Err(Error::InvalidArgument("cascade_forward needs a cascade model".into()));
    }
    check_pyramid(cfg, pyramid)?;
    let k = model.landmarks;
    let depth = depth.clamp(1, cfg.scales.len());

    let coarse = &pyramid[0];
    let x0 = g.constant(Tensor::from_volume(coarse));
    let out0 = model.nets[0].forward(g, &handles.nets[0], x0, coarse.geometry(), Head::CenterOfMass)?;
    let pts0 = out0.points.expect("center-of-mass head");
    let mut points = vec![Vec::with_capacity(k)];
    let mut heatmaps = vec![Vec::with_capacity(k)];
    for l in 0..k {
        points[0].push(g.select_channel(pts0, l)?);
        heatmaps[0].push(g.select_channel(out0.heatmap, l)?);
    }
    let mut crop_centers = vec![vec![coarse.center(); k]];
    let mut geometries = vec![vec![coarse.geometry(); k]];

    for s in 1..depth {
        let vol = &pyramid[s];
        let src = g.constant(Tensor::from_volume(vol));
        let spec = cfg.crop_spec(s, vol.geometry());
        let local = spec.local_geometry();
        let mut pts = Vec::with_capacity(k);
        let mut maps = Vec::with_capacity(k);
        let mut centers = Vec::with_capacity(k);
        let mut geoms = Vec::with_capacity(k);
        for l in 0..k {
            let prev = points[s - 1][l];
            let mut center = if detach_centers {
                let v = g.value(prev).clone();
                g.constant(v)
            } else {
                prev
            };
            if let Some(off) = noise.offset(cfg, s, l) {
                let off: Vec<T> = off.iter().map(|&v| T::of(v)).collect();
                center = g.add_const(center, &off)?;
            }
            let c = node_point(g, center);
            let patch = g.crop_resample(src, center, spec)?;
            let out = model.nets[s].forward(g, &handles.nets[s], patch, local, Head::CenterOfMass)?;
            let ch = if model.nets[s].out_channels == 1 { 0 } else { l };
            let offset = g.select_channel(out.points.expect("center-of-mass head"), ch)?;
            pts.push(g.add(center, offset)?);
            maps.push(g.select_channel(out.heatmap, ch)?);
            centers.push(c);
            geoms.push(spec.patch_geometry(c.to_array()));
        }
        points.push(pts);
        heatmaps.push(maps);
        crop_centers.push(centers);
        geometries.push(geoms);
    }
    Ok(CascadeOutput {
        points,
        heatmaps,
        crop_centers,
        geometries,
    })
}

/// Scheduled multi-scale loss: `sum_s w_s * mean_l |p_sl - gt_l|^2` (mm^2).
/// Scales with zero weight are left out of the graph.
pub fn cascade_loss<T: Real>(
    g: &mut Graph<T>,
    out: &CascadeOutput,
    gt: &[WorldPoint],
    weights: &[f64],
) -> Result<NodeId> {
    if gt.len() != out.points.first().map_or(0, |p| p.len()) {
        return Err(Error::Shape(format!(
            "{} ground-truth landmarks for {} predictions",
            gt.len(),
            out.points[0].len()
        )));
    }
    let k = T::of(gt.len() as f64);
    let mut terms = Vec::new();
    for (s, pts) in out.points.iter().enumerate() {
        let w = weights.get(s).copied().unwrap_or(0.0);
        if w == 0.0 {
            continue;
        }
        for (l, &p) in pts.iter().enumerate() {
            let t: Vec<T> = gt[l].to_array().iter().map(|&v| T::of(v)).collect();
            let d = g.sq_dist(p, &t)?;
            terms.push((d, T::of(w) / k));
        }
    }
    g.weighted_sum(&terms)
}

/// Plain evaluation of the cascade loss on finished predictions.
pub fn cascade_loss_value(points: &[Vec<WorldPoint>], gt: &[WorldPoint], weights: &[f64]) -> f64 {
    points
        .iter()
        .zip(weights)
        .map(|(pts, &w)| {
            w * pts
                .iter()
                .zip(gt)
                .map(|(p, q)| {
                    let d = *p - *q;
                    d.x * d.x + d.y * d.y + d.z * d.z
                })
                .sum::<f64>()
                / gt.len() as f64
        })
        .sum()
}

/// Gaussian heatmap target, one channel per landmark, peak 1.
pub fn heatmap_target(geometry: Geometry, dims: [usize; 3], gt: &[WorldPoint], sigma: f64) -> Result<Volume> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("heatmap sigma {sigma} must be > 0")));
    }
    geometry.validate()?;
    let n = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(n * gt.len());
    let k = 1.0 / (2.0 * sigma * sigma);
    for p in gt {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let q = geometry.voxel_center([x as f64, y as f64, z as f64]);
                    let d = q - *p;
                    data.push(libm::exp(-(d.x * d.x + d.y * d.y + d.z * d.z) * k) as f32);
                }
            }
        }
    }
    Volume::new(dims, geometry, gt.len().max(1), data)
}

/// Forward pass of a single-scale model on the full volume at its level.
pub fn single_scale_forward<T: Real>(
    g: &mut Graph<T>,
    model: &Model,
    handles: &Handles,
    cfg: &CascadeConfig,
    pyramid: &[Volume],
) -> Result<(NodeId, Option<NodeId>, Geometry)> {
    let head = match model.architecture {
        Architecture::SingleScaleCom => Head::CenterOfMass,
        Architecture::SingleScaleHeatmap => Head::Heatmap,
        Architecture::Cascade => {
            return Err(Error::InvalidArgument(
                "single_scale_forward needs a single-scale model".into(),
            ))
        }
    };
    check_pyramid(cfg, pyramid)?;
    let level = cfg
        .single_scale_level()
        .ok_or_else(|| Error::config("cascade.single_scale.spacing", "not a pyramid level"))?;
    let vol = &pyramid[level];
    let x = g.constant(Tensor::from_volume(vol));
    let out = model.nets[0].forward(g, &handles.nets[0], x, vol.geometry(), head)?;
    Ok((out.heatmap, out.points, vol.geometry()))
}

/// World position of the largest voxel in each channel.
pub fn argmax_points<T: Real>(values: &Tensor<T>, geometry: Geometry) -> Vec<WorldPoint> {
    let s = values.shape();
    let [nx, ny, _] = s.dims;
    (0..s.channels)
        .map(|c| {
            let ch = values.channel(c);
            let mut best = 0;
            for (i, &v) in ch.iter().enumerate() {
                if v > ch[best] {
                    best = i;
                }
            }
            let v = [(best % nx) as f64, ((best / nx) % ny) as f64, (best / (nx * ny)) as f64];
            geometry.voxel_center(v)
        })
        .collect()
}

impl Model {
    /// Final-scale predictions of one pass, without gradients.
    pub fn predict(&self, cfg: &CascadeConfig, pyramid: &[Volume], noise: &NoiseMode) -> Result<Vec<WorldPoint>> {
        let mut g = Graph::<f32>::new();
        let handles = register(&mut g, self, &[]);
        match self.architecture {
            Architecture::Cascade => {
                let out = cascade_forward(&mut g, self, &handles, cfg, pyramid, noise, false, cfg.scales.len())?;
                Ok(out.final_points(&g))
            }
            Architecture::SingleScaleCom => {
                let (_, pts, _) = single_scale_forward(&mut g, self, &handles, cfg, pyramid)?;
                let pts = pts.expect("center-of-mass head");
                Ok((0..self.landmarks)
                    .map(|l| {
                        let v = &g.value(pts).data()[3 * l..3 * l + 3];
                        WorldPoint::new(v[0] as f64, v[1] as f64, v[2] as f64)
                    })
                    .collect())
            }
            Architecture::SingleScaleHeatmap => {
                let (map, _, geom) = single_scale_forward(&mut g, self, &handles, cfg, pyramid)?;
                Ok(argmax_points(g.value(map), geom))
            }
        }
    }

    /// Heatmaps of one pass as volumes, `[scale][landmark]` (a single entry
    /// for single-scale models).
    pub fn heatmaps(&self, cfg: &CascadeConfig, pyramid: &[Volume]) -> Result<Vec<Vec<Volume>>> {
        let mut g = Graph::<f32>::new();
        let handles = register(&mut g, self, &[]);
        let to_vol = |g: &Graph<f32>, id: NodeId, geom: Geometry| -> Result<Volume> {
            let t = g.value(id);
            Volume::new(t.shape().dims, geom, t.shape().channels, t.to_vec())
        };
        match self.architecture {
            Architecture::Cascade => {
                let out = cascade_forward(
                    &mut g,
                    self,
                    &handles,
                    cfg,
                    pyramid,
                    &NoiseMode::Off,
                    false,
                    cfg.scales.len(),
                )?;
                out.heatmaps
                    .iter()
                    .zip(&out.geometries)
                    .map(|(maps, geoms)| maps.iter().zip(geoms).map(|(&m, &gm)| to_vol(&g, m, gm)).collect())
                    .collect()
            }
            _ => {
                let (map, _, geom) = single_scale_forward(&mut g, self, &handles, cfg, pyramid)?;
                Ok(vec![vec![to_vol(&g, map, geom)?]])
            }
        }
    }
}
