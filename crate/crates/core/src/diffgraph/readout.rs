//! Spatial softmax and the center-of-mass readout.

use alloc::vec::Vec;

use super::Shape;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::Geometry;

pub(super) fn softmax_forward<T: Real>(x: &[T], s: Shape, temperature: T) -> Vec<T> {
    let nv = s.spatial_len();
    let mut out = Vec::with_capacity(x.len());
    for c in 0..s.channels {
        let xc = &x[c * nv..(c + 1) * nv];
        let m = xc.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(xc.iter().map(|&v| ((v - m) / temperature).exp()));
        let z = T::of(out[start..].iter().map(|v| v.as_f64()).sum::<f64>());
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    out
}

pub(super) fn softmax_backward<T: Real>(gx: &mut [T], g: &[T], y: &[T], s: Shape, temperature: T) {
    let nv = s.spatial_len();
    for c in 0..s.channels {
        let r = c * nv..(c + 1) * nv;
        let (yc, gc) = (&y[r.clone()], &g[r.clone()]);
        let inner: T = yc.iter().zip(gc).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in gx[r].iter_mut().zip(yc).zip(gc) {
            *d += yv * (gv - inner) / temperature;
        }
    }
}

/// Per-axis world coordinates of voxel centers.
fn axis_coords<T: Real>(s: Shape, geom: &Geometry) -> [Vec<T>; 3] {
    core::array::from_fn(|d| {
        (0..s.dims[d])
            .map(|i| T::of(geom.origin[d] + i as f64 * geom.spacing[d]))
            .collect()
    })
}

pub(super) fn com_forward<T: Real>(w: &[T], s: Shape, geom: &Geometry) -> Result<Vec<T>> {
    let nv = s.spatial_len();
    let [cx, cy, cz] = axis_coords::<f64>(s, geom);
    let mut out = Vec::with_capacity(3 * s.channels);
    for c in 0..s.channels {
        let wc = &w[c * nv..(c + 1) * nv];
        // accumulate in f64 so large grids keep single-precision accuracy
        let mut total = 0.0f64;
        let mut acc = [0.0f64; 3];
        let mut i = 0;
        for &z in &cz {
            for &y in &cy {
                for &x in &cx {
                    let v = wc[i].as_f64();
                    total += v;
                    acc[0] += v * x;
                    acc[1] += v * y;
                    acc[2] += v * z;
                    i += 1;
                }
            }
        }
        if !(total > 0.0) {
            return Err(Error::DegenerateHeatmap(total));
        }
        out.extend(acc.iter().map(|&a| T::of(a / total)));
    }
    Ok(out)
}

pub(super) fn com_backward<T: Real>(gw: &mut [T], g: &[T], w: &[T], c: &[T], s: Shape, geom: &Geometry) {
    let nv = s.spatial_len();
    let [cx, cy, cz] = axis_coords::<T>(s, geom);
    for ch in 0..s.channels {
        let wc = &w[ch * nv..(ch + 1) * nv];
        let total = T::of(wc.iter().map(|v| v.as_f64()).sum::<f64>());
        let (gx, gy, gz) = (g[3 * ch] / total, g[3 * ch + 1] / total, g[3 * ch + 2] / total);
        let (mx, my, mz) = (c[3 * ch], c[3 * ch + 1], c[3 * ch + 2]);
        let dst = &mut gw[ch * nv..(ch + 1) * nv];
        let mut i = 0;
        for &z in &cz {
            let tz = gz * (z - mz);
            for &y in &cy {
                let tyz = gy * (y - my) + tz;
                for &x in &cx {
                    dst[i] += gx * (x - mx) + tyz;
                    i += 1;
                }
            }
        }
    }
}
