//! Dense scalar volumes with physical geometry.
//!
//! Voxel `(0,0,0)` has its *center* at `origin`; voxel `v` sits at
//! `origin + v * spacing` (mm). Data layout is x-fastest, then y, then z,
//! then channel.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the physical (world) frame, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        WorldPoint { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        WorldPoint::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(self) -> f64 {
        libm::sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
    }

    pub fn distance(self, other: WorldPoint) -> f64 {
        (self - other).norm()
    }
}

impl Add for WorldPoint {
    type Output = WorldPoint;
    fn add(self, o: WorldPoint) -> WorldPoint {
        WorldPoint::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for WorldPoint {
    type Output = WorldPoint;
    fn sub(self, o: WorldPoint) -> WorldPoint {
        WorldPoint::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// Spacing and origin of a voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry { spacing, origin };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(spacing: f64, origin: [f64; 3]) -> Result<Self> {
        Geometry::new([spacing; 3], origin)
    }

    pub fn validate(&self) -> Result<()> {
        for d in 0..3 {
            if !(self.spacing[d].is_finite() && self.spacing[d] > 0.0) {
                return Err(Error::Geometry(format!(
                    "spacing[{d}] = {} must be finite and > 0",
                    self.spacing[d]
                )));
            }
            if !self.origin[d].is_finite() {
                return Err(Error::Geometry(format!("origin[{d}] is not finite")));
            }
        }
        Ok(())
    }

    pub fn world_to_voxel(&self, p: WorldPoint) -> Result<[f64; 3]> {
        if !p.is_finite() {
            return Err(Error::NonFinite("world point"));
        }
        let p = p.to_array();
        Ok(core::array::from_fn(|d| (p[d] - self.origin[d]) / self.spacing[d]))
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> Result<WorldPoint> {
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("voxel coordinate"));
        }
        Ok(self.voxel_center(v))
    }

    #[inline]
    pub(crate) fn voxel_center(&self, v: [f64; 3]) -> WorldPoint {
        WorldPoint::new(
            self.origin[0] + v[0] * self.spacing[0],
            self.origin[1] + v[1] * self.spacing[1],
            self.origin[2] + v[2] * self.spacing[2],
        )
    }

    pub fn translated(&self, t: [f64; 3]) -> Geometry {
        Geometry {
            spacing: self.spacing,
            origin: core::array::from_fn(|d| self.origin[d] + t[d]),
        }
    }
}

/// A dense 3D grid of `f32` samples with physical geometry.
///
/// The sample buffer is reference counted so a volume can be fed into a
/// differentiable graph without copying.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    geometry: Geometry,
    channels: usize,
    data: Arc<Vec<f32>>,
}

impl Volume {
    pub fn new(dims: [usize; 3], geometry: Geometry, channels: usize, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if dims.contains(&0) {
            return Err(Error::Shape(format!("dims {dims:?} must all be >= 1")));
        }
        if channels == 0 {
            return Err(Error::Shape("channels must be >= 1".into()));
        }
        let expected = dims[0] * dims[1] * dims[2] * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims:?} x {channels} channels = {expected}",
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            geometry,
            channels,
            data: Arc::new(data),
        })
    }

    pub fn zeros(dims: [usize; 3], geometry: Geometry) -> Result<Self> {
        let n = dims.iter().product();
        Volume::new(dims, geometry, 1, vec![0.0; n])
    }

    /// Single-channel volume whose value at voxel `(i, j, k)` is `f(i, j, k)`.
    pub fn from_fn(
        dims: [usize; 3],
        geometry: Geometry,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(dims, geometry, 1, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shared_data(&self) -> &Arc<Vec<f32>> {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Physical extent along each axis, `dims * spacing`.
    pub fn extent(&self) -> [f64; 3] {
        core::array::from_fn(|d| self.dims[d] as f64 * self.geometry.spacing[d])
    }

    /// World coordinates of the first and last voxel centers.
    pub fn center_bounds(&self) -> (WorldPoint, WorldPoint) {
        let hi: [f64; 3] = core::array::from_fn(|d| (self.dims[d] - 1) as f64);
        (self.geometry.voxel_center([0.0; 3]), self.geometry.voxel_center(hi))
    }

    pub fn center(&self) -> WorldPoint {
        let mid: [f64; 3] = core::array::from_fn(|d| (self.dims[d] - 1) as f64 / 2.0);
        self.geometry.voxel_center(mid)
    }

    pub fn world_to_voxel(&self, p: WorldPoint) -> Result<[f64; 3]> {
        self.geometry.world_to_voxel(p)
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> Result<WorldPoint> {
        self.geometry.voxel_to_world(v)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn with_geometry(&self, geometry: Geometry) -> Result<Volume> {
        geometry.validate()?;
        Ok(Volume {
            geometry,
            ..self.clone()
        })
    }

    /// Box-average pooling by an integer factor per axis.
    ///
    /// The output origin moves to the center of the first block so voxel
    /// centers stay in the same world frame.
    pub fn downsample(&self, factor: [usize; 3]) -> Result<Volume> {
        for d in 0..3 {
            if factor[d] == 0 || !self.dims[d].is_multiple_of(factor[d]) {
                return Err(Error::Shape(format!(
                    "dim {} along axis {d} is not divisible by factor {}",
                    self.dims[d], factor[d]
                )));
            }
        }
        let [fx, fy, fz] = factor;
        let out_dims = [self.dims[0] / fx, self.dims[1] / fy, self.dims[2] / fz];
        let n_out = out_dims[0] * out_dims[1] * out_dims[2];
        let n_in = self.voxel_count();
        let norm = 1.0 / (fx * fy * fz) as f64;
        let mut out = Vec::with_capacity(n_out * self.channels);
        let mut acc = vec![0.0f64; out_dims[0]];
        for c in 0..self.channels {
            let src = &self.data[c * n_in..(c + 1) * n_in];
            for oz in 0..out_dims[2] {
                for oy in 0..out_dims[1] {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for z in oz * fz..(oz + 1) * fz {
                        for y in oy * fy..(oy + 1) * fy {
                            let row = &src[(z * self.dims[1] + y) * self.dims[0]..][..self.dims[0]];
                            for (ox, a) in acc.iter_mut().enumerate() {
                                *a += row[ox * fx..(ox + 1) * fx].iter().map(|&v| v as f64).sum::<f64>();
                            }
                        }
                    }
                    out.extend(acc.iter().map(|&a| (a * norm) as f32));
                }
            }
        }
        let g = self.geometry;
        let geometry = Geometry {
            spacing: core::array::from_fn(|d| g.spacing[d] * factor[d] as f64),
            origin: core::array::from_fn(|d| g.origin[d] + (factor[d] as f64 - 1.0) / 2.0 * g.spacing[d]),
        };
        Volume::new(out_dims, geometry, self.channels, out)
    }

    /// Trilinear sample of channel 0 at a world point; neighbours outside
    /// the grid contribute `fill`.
    pub fn sample_trilinear(&self, p: WorldPoint, fill: f32) -> f32 {
        let u = match self.world_to_voxel(p) {
            Ok(u) => u,
            Err(_) => return fill,
        };
        let i0: [i64; 3] = core::array::from_fn(|d| libm::floor(u[d]) as i64);
        let f: [f64; 3] = core::array::from_fn(|d| u[d] - i0[d] as f64);
        let mut acc = 0.0f64;
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            let mut inside = true;
            for d in 0..3 {
                let c = i0[d] + off[d] as i64;
                w *= if off[d] == 1 { f[d] } else { 1.0 - f[d] };
                if c < 0 || c >= self.dims[d] as i64 {
                    inside = false;
                } else {
                    idx[d] = c as usize;
                }
            }
            let v = if inside { self.get(idx[0], idx[1], idx[2]) } else { fill };
            acc += w * v as f64;
        }
        acc as f32
    }

    /// Circularly shift the samples by `shift` voxels per axis; geometry is unchanged.
    pub fn circular_shift(&self, shift: [isize; 3]) -> Volume {
        let [nx, ny, nz] = self.dims;
        let n = self.voxel_count();
        let mut out = vec![0.0f32; self.data.len()];
        let wrap = |i: usize, s: isize, n: usize| -> usize { (i as isize + s).rem_euclid(n as isize) as usize };
        for c in 0..self.channels {
            for k in 0..nz {
                let tk = wrap(k, shift[2], nz);
                for j in 0..ny {
                    let tj = wrap(j, shift[1], ny);
                    for i in 0..nx {
                        let ti = wrap(i, shift[0], nx);
                        out[c * n + (tk * ny + tj) * nx + ti] = self.data[c * n + (k * ny + j) * nx + i];
                    }
                }
            }
        }
        Volume {
            data: Arc::new(out),
            ..self.clone()
        }
    }
}
