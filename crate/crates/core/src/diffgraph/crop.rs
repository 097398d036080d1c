//! Differentiable crop-and-resample.
//!
//! Output voxel `j` samples the source trilinearly at world point
//! `center + (j - (n - 1) / 2) * out_spacing`. Neighbours outside the
//! source grid read `fill`, which keeps the sampler continuous across the
//! border.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Shape;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Geometry;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    /// Geometry of the source tensor.
    pub src: Geometry,
    pub out_dims: [usize; 3],
    pub out_spacing: [f64; 3],
    pub fill: f64,
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        self.src.validate()?;
        if self.out_dims.contains(&0) {
            return Err(Error::Shape(format!("crop dims {:?} must be >= 1", self.out_dims)));
        }
        if self.out_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "crop spacing {:?} must be finite and > 0",
                self.out_spacing
            )));
        }
        Ok(())
    }

    /// Geometry of the patch relative to its center (origin at `-half extent`).
    pub fn local_geometry(&self) -> Geometry {
        Geometry {
            spacing: self.out_spacing,
            origin: core::array::from_fn(|d| -((self.out_dims[d] - 1) as f64) / 2.0 * self.out_spacing[d]),
        }
    }

    /// Geometry of the patch when centered at `center` (mm).
    pub fn patch_geometry(&self, center: [f64; 3]) -> Geometry {
        self.local_geometry().translated(center)
    }
}

struct AxisTaps<T> {
    lo: Vec<i64>,
    frac: Vec<T>,
}

fn axis_taps<T: Real>(center: [T; 3], spec: &CropSpec) -> [AxisTaps<T>; 3] {
    core::array::from_fn(|d| {
        let n = spec.out_dims[d];
        let half = T::of((n as f64 - 1.0) / 2.0);
        let (osp, org, sp) = (
            T::of(spec.out_spacing[d]),
            T::of(spec.src.origin[d]),
            T::of(spec.src.spacing[d]),
        );
        let mut lo = Vec::with_capacity(n);
        let mut frac = Vec::with_capacity(n);
        for j in 0..n {
            let u = (center[d] + (T::of(j as f64) - half) * osp - org) / sp;
            let f = u.floor();
            lo.push(f.as_f64() as i64);
            frac.push(u - f);
        }
        AxisTaps { lo, frac }
    })
}

/// Source flat indices (or `None` when outside) of the 8 trilinear corners.
#[inline]
fn corners(dims: [usize; 3], lo: [i64; 3]) -> [Option<usize>; 8] {
    let inside = |v: i64, n: usize| v >= 0 && (v as usize) < n;
    core::array::from_fn(|c| {
        let p = [
            lo[0] + (c & 1) as i64,
            lo[1] + ((c >> 1) & 1) as i64,
            lo[2] + ((c >> 2) & 1) as i64,
        ];
        if inside(p[0], dims[0]) && inside(p[1], dims[1]) && inside(p[2], dims[2]) {
            Some((p[2] as usize * dims[1] + p[1] as usize) * dims[0] + p[0] as usize)
        } else {
            None
        }
    })
}

#[inline]
fn corner_weights<T: Real>(f: [T; 3]) -> [T; 8] {
    let one = T::one();
    core::array::from_fn(|c| {
        let wx = if c & 1 == 1 { f[0] } else { one - f[0] };
        let wy = if (c >> 1) & 1 == 1 { f[1] } else { one - f[1] };
        let wz = if (c >> 2) & 1 == 1 { f[2] } else { one - f[2] };
        wx * wy * wz
    })
}

pub(super) fn forward<T: Real>(src: &[T], ss: Shape, center: [T; 3], spec: &CropSpec) -> Vec<T> {
    let taps = axis_taps(center, spec);
    let fill = T::of(spec.fill);
    let nv = ss.spatial_len();
    let od = spec.out_dims;
    let mut out = Vec::with_capacity(ss.channels * od[0] * od[1] * od[2]);
    for c in 0..ss.channels {
        let sc = &src[c * nv..(c + 1) * nv];
        for k in 0..od[2] {
            for j in 0..od[1] {
                for i in 0..od[0] {
                    let lo = [taps[0].lo[i], taps[1].lo[j], taps[2].lo[k]];
                    let w = corner_weights([taps[0].frac[i], taps[1].frac[j], taps[2].frac[k]]);
                    let idx = corners(ss.dims, lo);
                    let mut v = T::zero();
                    for q in 0..8 {
                        v += w[q] * idx[q].map_or(fill, |p| sc[p]);
                    }
                    out.push(v);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward<T: Real>(
    src: &[T],
    ss: Shape,
    center: [T; 3],
    spec: &CropSpec,
    g: &[T],
    want_src: bool,
    want_center: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let taps = axis_taps(center, spec);
    let fill = T::of(spec.fill);
    let nv = ss.spatial_len();
    let od = spec.out_dims;
    let one = T::one();
    let mut gsrc = want_src.then(|| vec![T::zero(); src.len()]);
    let mut du = [T::zero(); 3];
    let mut o = 0;
    for c in 0..ss.channels {
        let sc = &src[c * nv..(c + 1) * nv];
        for k in 0..od[2] {
            for j in 0..od[1] {
                for i in 0..od[0] {
                    let go = g[o];
                    o += 1;
                    let lo = [taps[0].lo[i], taps[1].lo[j], taps[2].lo[k]];
                    let f = [taps[0].frac[i], taps[1].frac[j], taps[2].frac[k]];
                    let idx = corners(ss.dims, lo);
                    if let Some(gs) = gsrc.as_mut() {
                        let w = corner_weights(f);
                        for q in 0..8 {
                            if let Some(p) = idx[q] {
                                gs[c * nv + p] += w[q] * go;
                            }
                        }
                    }
                    if want_center {
                        for q in 0..8 {
                            let v = idx[q].map_or(fill, |p| sc[p]);
                            let bits = [q & 1, (q >> 1) & 1, (q >> 2) & 1];
                            let lin: [T; 3] = core::array::from_fn(|d| if bits[d] == 1 { f[d] } else { one - f[d] });
                            let sign: [T; 3] = core::array::from_fn(|d| if bits[d] == 1 { one } else { -one });
                            du[0] += go * v * sign[0] * lin[1] * lin[2];
                            du[1] += go * v * lin[0] * sign[1] * lin[2];
                            du[2] += go * v * lin[0] * lin[1] * sign[2];
                        }
                    }
                }
            }
        }
    }
    let gc = want_center.then(|| (0..3).map(|d| du[d] / T::of(spec.src.spacing[d])).collect());
    (gsrc, gc)
}
