//! Central finite-difference verification of analytic gradients.
//!
//! The check only ever calls the forward pass, so it stays independent of
//! the backward code it verifies.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CropSpec, Graph, NodeId, Shape, Tensor};
use crate::error::Result;
use crate::volume::Geometry;

/// Default finite-difference step.
pub const EPS: f64 = 1e-4;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, 1e-8)
}

fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic and central-difference gradients of a graph-building
/// closure with respect to every element of every input.
///
/// The closure output is reduced to a scalar with a fixed random projection
/// drawn from `probe_seed`. Returns the maximum relative error.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, probe_seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    grad_check_with_floor(inputs, eps, 1e-8, probe_seed, build)
}

/// [`grad_check`] with a custom denominator floor for the relative error.
pub fn grad_check_with_floor<F>(inputs: &[Tensor<f64>], eps: f64, floor: f64, probe_seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut probe: Vec<f64> = Vec::new();
    let mut eval = |vals: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals
            .iter()
            .map(|t| {
                if grads {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let out = build(&mut g, &ids)?;
        if probe.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
            probe = (0..g.shape(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
        let loss = g.dot_const(out, &probe)?;
        let value = g.value(loss).data()[0];
        let mut gs = Vec::new();
        if grads {
            g.backward(loss)?;
            gs = ids.iter().map(|&i| g.grad(i).unwrap_or(&[]).to_vec()).collect();
        }
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.shape().len() {
            let mut plus = t.to_vec();
            plus[e] += eps;
            work[ti] = t.with_data(plus)?;
            let (fp, _) = eval(&work, false)?;
            let mut minus = t.to_vec();
            minus[e] -= eps;
            work[ti] = t.with_data(minus)?;
            let (fm, _) = eval(&work, false)?;
            work[ti] = t.clone();
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error_with_floor(analytic[ti][e], numeric, floor));
        }
    }
    Ok(worst)
}

/// Outcome of one operator in the oracle suite.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: String,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape-sized buffer")
}

/// Values bounded away from zero so relu kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..shape.len())
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape-sized buffer")
}

/// A random permutation of well-separated levels, so no pooling window holds
/// two values within `2 * EPS` of each other.
fn separated(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let n = shape.len();
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 + rng.random_range(0.0..0.003)).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        levels.swap(i, j);
    }
    Tensor::new(shape, levels).expect("shape-sized buffer")
}

fn random_geometry(rng: &mut ChaCha8Rng) -> Geometry {
    Geometry {
        spacing: core::array::from_fn(|_| rng.random_range(0.5..2.0)),
        origin: core::array::from_fn(|_| rng.random_range(-10.0..10.0)),
    }
}

/// Crop spec plus a center whose samples all sit 0.3 (or 0.8) voxel past a
/// grid line, keeping the finite differences clear of trilinear kinks.
fn crop_case(
    rng: &mut ChaCha8Rng,
    src_dims: [usize; 3],
    out_dims: [usize; 3],
    ratio: f64,
    near_border: bool,
) -> (CropSpec, [f64; 3]) {
    let src = random_geometry(rng);
    let spec = CropSpec {
        src,
        out_dims,
        out_spacing: core::array::from_fn(|d| src.spacing[d] * ratio),
        fill: rng.random_range(-0.5..0.5),
    };
    let center = core::array::from_fn(|d| {
        let half_span = (out_dims[d] as f64 - 1.0) / 2.0 * ratio;
        let first = if near_border {
            -1.0 + 0.3
        } else {
            let hi = libm::floor(src_dims[d] as f64 - 1.0 - 2.0 * half_span - 0.3).max(0.0) as u32;
            rng.random_range(0..=hi) as f64 + 0.3
        };
        let u_center = first + half_span;
        src.origin[d] + u_center * src.spacing[d]
    });
    (spec, center)
}

/// Run the finite-difference oracle over every differentiable operator for
/// `seeds` random instances each.
pub fn oracle_suite(seeds: usize, base_seed: u64) -> Result<Vec<OpCheck>> {
    type Case = fn(&mut ChaCha8Rng, u64) -> Result<f64>;
    let cases: [(&str, Case); 13] = [
        ("conv3d", |rng, s| {
            let x = uniform(rng, Shape::new(1, [4, 4, 4]), -1.0, 1.0);
            let w = uniform(rng, Shape::new(1, [3, 3, 3]), -1.0, 1.0);
            let b = uniform(rng, Shape::new(1, [1, 1, 1]), -1.0, 1.0);
            grad_check(&[x, w, b], EPS, s, |g, i| g.conv3d(i[0], i[1], i[2], 1, 1))
        }),
        ("conv3d_multichannel", |rng, s| {
            let x = uniform(rng, Shape::new(2, [4, 4, 4]), -1.0, 1.0);
            let w = uniform(rng, Shape::new(6, [3, 3, 3]), -1.0, 1.0);
            let b = uniform(rng, Shape::new(3, [1, 1, 1]), -1.0, 1.0);
            grad_check(&[x, w, b], EPS, s, |g, i| g.conv3d(i[0], i[1], i[2], 1, 1))
        }),
        ("conv3d_strided", |rng, s| {
            let x = uniform(rng, Shape::new(2, [5, 4, 4]), -1.0, 1.0);
            let w = uniform(rng, Shape::new(4, [3, 3, 3]), -1.0, 1.0);
            let b = uniform(rng, Shape::new(2, [1, 1, 1]), -1.0, 1.0);
            grad_check(&[x, w, b], EPS, s, |g, i| g.conv3d(i[0], i[1], i[2], 2, 1))
        }),
        ("relu", |rng, s| {
            let x = away_from_zero(rng, Shape::new(2, [4, 4, 4]));
            grad_check(&[x], EPS, s, |g, i| Ok(g.relu(i[0])))
        }),
        ("maxpool2", |rng, s| {
            let x = separated(rng, Shape::new(2, [4, 4, 4]));
            grad_check(&[x], EPS, s, |g, i| g.maxpool2(i[0]))
        }),
        ("trilinear_upsample2", |rng, s| {
            let x = uniform(rng, Shape::new(2, [4, 4, 4]), -1.0, 1.0);
            grad_check(&[x], EPS, s, |g, i| Ok(g.upsample2(i[0])))
        }),
        ("concat_channels", |rng, s| {
            let a = uniform(rng, Shape::new(2, [4, 4, 4]), -1.0, 1.0);
            let b = uniform(rng, Shape::new(1, [4, 4, 4]), -1.0, 1.0);
            grad_check(&[a, b], EPS, s, |g, i| g.concat_channels(i[0], i[1]))
        }),
        ("spatial_softmax", |rng, s| {
            let x = uniform(rng, Shape::new(2, [4, 4, 4]), -2.0, 2.0);
            let t = rng.random_range(0.5..2.0);
            grad_check(&[x], EPS, s, move |g, i| g.spatial_softmax(i[0], t))
        }),
        ("center_of_mass", |rng, s| {
            let w = uniform(rng, Shape::new(2, [4, 4, 4]), 0.1, 1.0);
            let geom = random_geometry(rng);
            grad_check(&[w], EPS, s, move |g, i| g.center_of_mass(i[0], geom))
        }),
        ("softmax_center_of_mass", |rng, s| {
            let x = uniform(rng, Shape::new(1, [4, 4, 4]), -2.0, 2.0);
            let geom = random_geometry(rng);
            grad_check(&[x], EPS, s, move |g, i| {
                let w = g.spatial_softmax(i[0], 1.0)?;
                g.center_of_mass(w, geom)
            })
        }),
        ("crop_resample", |rng, s| {
            let src = uniform(rng, Shape::new(2, [6, 6, 6]), -1.0, 1.0);
            let (spec, c) = crop_case(rng, [6, 6, 6], [3, 4, 3], 1.0, false);
            let center = Tensor::new(Shape::new(1, [3, 1, 1]), c.to_vec())?;
            grad_check(&[src, center], EPS, s, move |g, i| g.crop_resample(i[0], i[1], spec))
        }),
        ("crop_resample_finer", |rng, s| {
            let src = uniform(rng, Shape::new(1, [6, 6, 6]), -1.0, 1.0);
            let (spec, c) = crop_case(rng, [6, 6, 6], [5, 5, 5], 0.5, false);
            let center = Tensor::new(Shape::new(1, [3, 1, 1]), c.to_vec())?;
            grad_check(&[src, center], EPS, s, move |g, i| g.crop_resample(i[0], i[1], spec))
        }),
        ("crop_resample_border", |rng, s| {
            let src = uniform(rng, Shape::new(1, [5, 5, 5]), -1.0, 1.0);
            let (spec, c) = crop_case(rng, [5, 5, 5], [4, 4, 4], 1.0, true);
            let center = Tensor::new(Shape::new(1, [3, 1, 1]), c.to_vec())?;
            grad_check(&[src, center], EPS, s, move |g, i| g.crop_resample(i[0], i[1], spec))
        }),
    ];
    let mut report = Vec::with_capacity(cases.len());
    for (ci, (name, case)) in cases.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..seeds {
            let seed = crate::rng::derive_seed(base_seed, ci as u64, k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            worst = worst.max(case(&mut rng, seed ^ 0x5eed)?);
        }
        report.push(OpCheck {
            op: String::from(*name),
            seeds,
            max_rel_error: worst,
        });
    }
    Ok(report)
}
