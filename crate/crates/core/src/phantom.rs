//! Procedural bifurcating-tube phantoms with exact junction landmarks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, stream_rng};
use crate::volume::{Geometry, Volume, WorldPoint};

/// Minimum distance (mm) between a junction and any volume face.
pub const FACE_MARGIN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub extent_mm: [f64; 3],
    pub base_spacing: f64,
    /// Parent tube radius range (mm); children get 0.8 of the parent radius.
    pub radius_range: [f64; 2],
    /// Full opening angle between the two child tubes (degrees).
    pub branch_angle_range: [f64; 2],
    /// Half-width of the uniform junction jitter per axis (mm).
    pub jitter_mm: f64,
    /// Distance of each junction's nominal position from the mid-sagittal plane (mm).
    pub junction_offset_mm: f64,
    pub background: f64,
    pub vessel: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extent_mm: [96.0; 3],
            base_spacing: 0.75,
            radius_range: [2.0, 3.0],
            branch_angle_range: [25.0, 50.0],
            jitter_mm: 6.0,
            junction_offset_mm: 16.0,
            background: 0.0,
            vessel: 1.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("phantom.{k}");
        if !(self.base_spacing.is_finite() && self.base_spacing > 0.0) {
            return Err(Error::config(key("base_spacing"), "must be > 0"));
        }
        for d in 0..3 {
            let e = self.extent_mm[d];
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::config(key("extent_mm"), "must be > 0"));
            }
            let n = e / self.base_spacing;
            if (n - libm::round(n)).abs() > 1e-9 * n {
                return Err(Error::config(key("extent_mm"), "must be a whole number of base voxels"));
            }
        }
        let [r0, r1] = self.radius_range;
        if !(r0.is_finite() && r1.is_finite() && r0 <= r1) {
            return Err(Error::config(key("radius_range"), "must be an ordered pair"));
        }
        if r0 < 2.0 * self.base_spacing {
            return Err(Error::config(key("radius_range"), "radius must be >= 2 * base_spacing"));
        }
        let [a0, a1] = self.branch_angle_range;
        if !(a0.is_finite() && a1.is_finite() && 0.0 < a0 && a0 <= a1 && a1 < 180.0) {
            return Err(Error::config(
                key("branch_angle_range"),
                "must be an ordered pair in (0, 180)",
            ));
        }
        for (name, v) in [
            ("jitter_mm", self.jitter_mm),
            ("junction_offset_mm", self.junction_offset_mm),
            ("noise_std", self.noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key(name), "must be >= 0"));
            }
        }
        if !(self.background.is_finite() && self.vessel.is_finite()) {
            return Err(Error::config(key("vessel"), "intensities must be finite"));
        }
        let reach = [self.junction_offset_mm + self.jitter_mm, self.jitter_mm, self.jitter_mm];
        for d in 0..3 {
            if self.extent_mm[d] / 2.0 - reach[d] < FACE_MARGIN {
                return Err(Error::config(
                    key("jitter_mm"),
                    format!("junctions may come closer than {FACE_MARGIN} mm to a face"),
                ));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        core::array::from_fn(|d| libm::round(self.extent_mm[d] / self.base_spacing) as usize)
    }

    /// Base grid geometry: the lower volume face sits at world 0.
    pub fn geometry(&self) -> Geometry {
        let h = self.base_spacing / 2.0;
        Geometry {
            spacing: [self.base_spacing; 3],
            origin: [h; 3],
        }
    }
}

type P = [f64; 3];

fn sub(a: P, b: P) -> P {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn axpy(a: P, k: f64, b: P) -> P {
    [a[0] + k * b[0], a[1] + k * b[1], a[2] + k * b[2]]
}

fn dot(a: P, b: P) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

struct Segment {
    a: P,
    b: P,
    r: f64,
}

impl Segment {
    fn distance(&self, p: P) -> f64 {
        let ab = sub(self.b, self.a);
        let ap = sub(p, self.a);
        let len2 = dot(ab, ab);
        let t = if len2 > 0.0 {
            (dot(ap, ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = sub(p, axpy(self.a, t, ab));
        libm::sqrt(dot(q, q))
    }
}

fn bezier(p0: P, p1: P, p2: P, t: f64) -> P {
    let u = 1.0 - t;
    core::array::from_fn(|d| u * u * p0[d] + 2.0 * u * t * p1[d] + t * t * p2[d])
}

/// Tube segments of one junction: a curved parent rising from the bottom
/// face to `b`, then two straight children running towards the top face.
fn junction(rng: &mut impl Rng, spec: &PhantomSpec, b: P, mirror: f64) -> Vec<Segment> {
    let r = rng.random_range(spec.radius_range[0]..=spec.radius_range[1]);
    let [a0, a1] = spec.branch_angle_range;
    let half = rng.random_range(a0..=a1).to_radians() / 2.0;
    let azimuth = rng.random_range(-0.5f64..=0.5);
    let lean = rng.random_range(0.1f64..=0.3);
    let top = spec.extent_mm[2];

    let start = [
        b[0] + mirror * rng.random_range(0.0..=8.0),
        b[1] + rng.random_range(-6.0..=6.0),
        -2.0 * r,
    ];
    let ctrl = [
        (start[0] + b[0]) / 2.0 + mirror * rng.random_range(-6.0..=6.0),
        (start[1] + b[1]) / 2.0 + rng.random_range(-6.0..=6.0),
        (start[2] + b[2]) / 2.0,
    ];
    let mut segs = Vec::new();
    let n = 12;
    let mut prev = start;
    for i in 1..=n {
        let p = if i == n {
            b
        } else {
            bezier(start, ctrl, b, i as f64 / n as f64)
        };
        segs.push(Segment { a: prev, b: p, r });
        prev = p;
    }

    let (sa, ca) = (libm::sin(azimuth), libm::cos(azimuth));
    for side in [-1.0, 1.0] {
        let ang = lean + side * half;
        let dir = [mirror * ca * libm::sin(ang), sa * libm::sin(ang), libm::cos(ang)];
        let len = (top + 2.0 * r - b[2]) / dir[2].max(0.2);
        let m = 8;
        let mut prev = b;
        for i in 1..=m {
            let p = axpy(b, len * i as f64 / m as f64, dir);
            segs.push(Segment {
                a: prev,
                b: p,
                r: 0.8 * r,
            });
            prev = p;
        }
    }
    segs
}

/// Generate one phantom at base spacing and its two junction landmarks.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, Vec<WorldPoint>)> {
    spec.validate()?;
    let dims = spec.dims();
    let geom = spec.geometry();
    let h = spec.base_spacing;
    let mut rng = stream_rng(seed, stream::DATA, 0);

    let c: P = core::array::from_fn(|d| spec.extent_mm[d] / 2.0);
    let mut jitter = || -> P {
        core::array::from_fn(|_| {
            if spec.jitter_mm > 0.0 {
                rng.random_range(-spec.jitter_mm..=spec.jitter_mm)
            } else {
                0.0
            }
        })
    };
    let (j0, j1) = (jitter(), jitter());
    let left = [c[0] - spec.junction_offset_mm + j0[0], c[1] + j0[1], c[2] + j0[2]];
    let right = [c[0] + spec.junction_offset_mm + j1[0], c[1] + j1[1], c[2] + j1[2]];
    let mut segs = junction(&mut rng, spec, left, -1.0);
    segs.extend(junction(&mut rng, spec, right, 1.0));

    let n = dims[0] * dims[1] * dims[2];
    let mut cover = vec![0.0f64; n];
    for s in &segs {
        let reach = s.r + h;
        let lo: [usize; 3] = core::array::from_fn(|d| {
            let v = (s.a[d].min(s.b[d]) - reach) / h - 0.5;
            libm::floor(v).max(0.0) as usize
        });
        let hi: [usize; 3] = core::array::from_fn(|d| {
            let v = (s.a[d].max(s.b[d]) + reach) / h - 0.5;
            (libm::ceil(v).max(-1.0) as isize + 1).clamp(0, dims[d] as isize) as usize
        });
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let p = [(x as f64 + 0.5) * h, (y as f64 + 0.5) * h, (z as f64 + 0.5) * h];
                    let cov = ((s.r - s.distance(p)) / h + 0.5).clamp(0.0, 1.0);
                    let i = x + dims[0] * (y + dims[1] * z);
                    if cov > cover[i] {
                        cover[i] = cov;
                    }
                }
            }
        }
    }

    let mut noise_rng = stream_rng(seed, stream::DATA, 1);
    let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
    let data = cover
        .iter()
        .map(|&k| {
            let v = spec.background + (spec.vessel - spec.background) * k;
            let e = if spec.noise_std > 0.0 {
                normal.sample(&mut noise_rng)
            } else {
                0.0
            };
            (v + e) as f32
        })
        .collect();
    let vol = Volume::new(dims, geom, 1, data)?;
    Ok((vol, vec![WorldPoint::from_array(left), WorldPoint::from_array(right)]))
}

/// Integer downsampling factor from `base` to `spacing`.
pub fn scale_factor(base: f64, spacing: f64) -> Result<usize> {
    let f = spacing / base;
    let r = libm::round(f);
    if !(f.is_finite() && r >= 1.0 && (f - r).abs() <= 1e-9 * f) {
        return Err(Error::Geometry(format!(
            "scale {spacing} mm is not an integer multiple of base spacing {base} mm"
        )));
    }
    Ok(r as usize)
}

/// Grid size of the level at `spacing` for a base grid of `dims` voxels.
pub fn level_dims(dims: [usize; 3], base: f64, spacing: f64) -> Result<[usize; 3]> {
    let f = scale_factor(base, spacing)?;
    if dims.iter().any(|&n| n % f != 0) {
        return Err(Error::Geometry(format!("dims {dims:?} not divisible by factor {f}")));
    }
    Ok(dims.map(|n| n / f))
}

/// Box-averaged copies of `vol` at each spacing in `scales`, all in the
/// world frame of `vol`.
pub fn build_pyramid(vol: &Volume, scales: &[f64]) -> Result<Vec<Volume>> {
    let base = vol.spacing();
    if base.iter().any(|&s| (s - base[0]).abs() > 1e-12 * s) {
        return Err(Error::Geometry("pyramid needs an isotropic base volume".into()));
    }
    scales
        .iter()
        .map(|&s| {
            let f = scale_factor(base[0], s)?;
            if f == 1 {
                Ok(vol.clone())
            } else {
                vol.downsample([f; 3])
            }
        })
        .collect()
}

/// One generated case: pyramid plus ground truth.
#[derive(Debug, Clone)]
pub struct LandmarkSample {
    pub id: String,
    pub pyramid: Vec<Volume>,
    pub landmarks: Vec<WorldPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Planned entry of a dataset before any volume is generated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedSample {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub split: Split,
}

/// Ids, seeds and split assignment of `n` phantoms: the first `train`
/// indices go to training, the next `val` to validation, the rest to test.
pub fn plan_dataset(n: usize, split: [usize; 3], master_seed: u64) -> Result<Vec<PlannedSample>> {
    if split.iter().sum::<usize>() != n {
        return Err(Error::InvalidArgument(format!("split {split:?} does not sum to {n}")));
    }
    Ok((0..n)
        .map(|i| PlannedSample {
            id: format!("phantom_{i:04}"),
            index: i,
            seed: derive_seed(master_seed, stream::DATA, i as u64),
            split: if i < split[0] {
                Split::Train
            } else if i < split[0] + split[1] {
                Split::Val
            } else {
                Split::Test
            },
        })
        .collect())
}

/// Generate a planned phantom and its pyramid.
pub fn generate_sample(spec: &PhantomSpec, scales: &[f64], plan: &PlannedSample) -> Result<LandmarkSample> {
    let (vol, landmarks) = generate_phantom(spec, plan.seed)?;
    Ok(LandmarkSample {
        id: plan.id.clone(),
        pyramid: build_pyramid(&vol, scales)?,
        landmarks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            extent_mm: [48.0; 3],
            base_spacing: 1.0,
            jitter_mm: 3.0,
            junction_offset_mm: 8.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let s = small();
        let (a, la) = generate_phantom(&s, 7).unwrap();
        let (b, lb) = generate_phantom(&s, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = generate_phantom(&s, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn landmark_inside_tube_and_away_from_faces() {
        let s = PhantomSpec::default();
        for seed in 0..4 {
            let (vol, lms) = generate_phantom(&s, seed).unwrap();
            assert_eq!(lms.len(), 2);
            for p in lms {
                for d in 0..3 {
                    let v = p.to_array()[d];
                    assert!(v >= FACE_MARGIN && s.extent_mm[d] - v >= FACE_MARGIN);
                }
                let v = vol.world_to_voxel(p).unwrap().map(|c| libm::round(c) as usize);
                let i = vol.get(v[0], v[1], v[2]) as f64;
                assert!(i >= s.vessel - 4.0 * s.noise_std, "intensity {i}");
            }
        }
    }

    #[test]
    fn vessel_fraction_is_plausible() {
        let (vol, _) = generate_phantom(
            &PhantomSpec {
                noise_std: 0.0,
                ..small()
            },
            3,
        )
        .unwrap();
        let frac = vol.mean();
        assert!(frac > 0.005 && frac < 0.2, "{frac}");
        assert!(vol.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn invalid_specs() {
        let mut s = small();
        s.radius_range = [1.0, 2.0];
        s.base_spacing = 1.0;
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
        let mut s = small();
        s.jitter_mm = 20.0;
        assert!(s.validate().is_err());
        let mut s = small();
        s.extent_mm = [48.5, 48.0, 48.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn pyramid_identity_and_factors() {
        let (vol, _) = generate_phantom(&small(), 1).unwrap();
        let p = build_pyramid(&vol, &[1.0]).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0], vol);
        let p = build_pyramid(&vol, &[8.0, 4.0, 2.0, 1.0]).unwrap();
        assert_eq!(p[0].dims(), [6; 3]);
        assert_eq!(p[3].dims(), [48; 3]);
        let m = vol.mean();
        for level in &p {
            assert!((level.mean() - m).abs() <= 1e-6 * m.abs().max(1e-3));
            let (lo, hi) = (level.origin()[0] - level.spacing()[0] / 2.0, level.extent()[0]);
            assert!(lo.abs() < 1e-12 && (hi - 48.0).abs() < 1e-12);
        }
        assert!(build_pyramid(&vol, &[1.5]).is_err());
        assert!(build_pyramid(&vol, &[5.0]).is_err());
    }

    #[test]
    fn default_full_size_geometry_gives_patch_sized_coarse_level() {
        assert_eq!(level_dims([448; 3], 0.5, 4.0).unwrap(), [56; 3]);
        assert_eq!(level_dims([128; 3], 0.75, 6.0).unwrap(), [16; 3]);
    }

    #[test]
    fn dataset_plan() {
        let p = plan_dataset(10, [6, 2, 2], 5).unwrap();
        let count = |s| p.iter().filter(|x| x.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));
        assert_eq!(p, plan_dataset(10, [6, 2, 2], 5).unwrap());
        let mut ids: Vec<_> = p.iter().map(|x| x.id.clone()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(plan_dataset(10, [6, 2, 3], 5).is_err());
    }
}
