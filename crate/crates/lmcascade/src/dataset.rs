//! Generated phantom datasets on disk: `dataset.json` plus `volumes/`.

use std::fs;
use std::path::{Path, PathBuf};

use lmcascade_core::phantom::{generate_sample, plan_dataset, LandmarkSample, PhantomSpec, Split};
use lmcascade_core::WorldPoint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::volio::{read_volume, write_volume};
use crate::{AppError, AppResult, FORMAT_VERSION};

pub const MANIFEST: &str = "dataset.json";
pub const VOLUME_DIR: &str = "volumes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecEcho {
    pub phantom: PhantomSpec,
    pub scales: Vec<f64>,
    pub master_seed: u64,
    pub split: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    /// Paths relative to the dataset directory, coarsest scale first.
    pub volumes: Vec<String>,
    pub landmarks: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub spec: SpecEcho,
    pub samples: Vec<Entry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.samples.iter().filter(move |e| e.split == split)
    }
}

/// Generate `n` phantoms into `out`.
///
/// An existing non-empty `out` is refused unless `force` is set, in which
/// case only `dataset.json` and `volumes/` are replaced.
pub fn generate(cfg: &RunConfig, out: &Path, n: usize, seed: u64, force: bool) -> AppResult<Manifest> {
    if n == 0 {
        return Err(AppError::validation("dataset.n", "must be >= 1"));
    }
    let split = cfg.dataset.split_for(n);
    if split[0] == 0 || split[1] == 0 {
        return Err(AppError::validation(
            "dataset.n",
            format!("{n} phantoms leave an empty train or validation split ({split:?})"),
        ));
    }
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| AppError::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(AppError::Runtime(format!(
                "{} already exists; pass --force to overwrite",
                out.display()
            )));
        }
        let vols = out.join(VOLUME_DIR);
        if vols.exists() {
            fs::remove_dir_all(&vols).map_err(|e| AppError::io(&vols, e))?;
        }
    }
    let vol_dir = out.join(VOLUME_DIR);
    fs::create_dir_all(&vol_dir).map_err(|e| AppError::io(&vol_dir, e))?;

    let scales = &cfg.cascade.scales;
    let plan = plan_dataset(n, split, seed)?;
    let samples = plan
        .par_iter()
        .map(|p| -> AppResult<Entry> {
            let s = generate_sample(&cfg.phantom, scales, p)?;
            let mut volumes = Vec::with_capacity(scales.len());
            for (i, v) in s.pyramid.iter().enumerate() {
                let rel = format!("{VOLUME_DIR}/{}_s{i}.vol", s.id);
                write_volume(v, &out.join(&rel))?;
                volumes.push(rel);
            }
            Ok(Entry {
                id: s.id,
                split: p.split,
                seed: p.seed,
                volumes,
                landmarks: s.landmarks.iter().map(|l| l.to_array()).collect(),
            })
        })
        .collect::<AppResult<Vec<_>>>()?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        spec: SpecEcho {
            phantom: cfg.phantom.clone(),
            scales: scales.clone(),
            master_seed: seed,
            split,
        },
        samples,
    };
    let path = out.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| AppError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> AppResult<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| AppError::Runtime(format!("{}: {e}", path.display())))?;
    if m.version != FORMAT_VERSION {
        return Err(AppError::Runtime(format!(
            "{}: unsupported manifest version {}",
            path.display(),
            m.version
        )));
    }
    Ok(m)
}

/// Loaded dataset directory.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> AppResult<Dataset> {
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest: read_manifest(dir)?,
        })
    }

    /// Check that the stored pyramids match the cascade scales of `cfg`.
    pub fn check_scales(&self, cfg: &RunConfig) -> AppResult<()> {
        let have = &self.manifest.spec.scales;
        let want = &cfg.cascade.scales;
        if have.len() != want.len() || have.iter().zip(want).any(|(a, b)| (a - b).abs() > 1e-9 * b) {
            return Err(AppError::validation(
                "cascade.scales",
                format!("dataset was generated for scales {have:?}, config uses {want:?}"),
            ));
        }
        Ok(())
    }

    pub fn load_entry(&self, e: &Entry) -> AppResult<LandmarkSample> {
        let pyramid = e
            .volumes
            .iter()
            .map(|rel| read_volume(&self.dir.join(rel)).map_err(AppError::from))
            .collect::<AppResult<Vec<_>>>()?;
        Ok(LandmarkSample {
            id: e.id.clone(),
            pyramid,
            landmarks: e.landmarks.iter().map(|&l| WorldPoint::from_array(l)).collect(),
        })
    }

    /// All samples of `split` in manifest order.
    pub fn load_split(&self, split: Split) -> AppResult<Vec<LandmarkSample>> {
        let entries: Vec<&Entry> = self.manifest.entries(split).collect();
        entries.par_iter().map(|e| self.load_entry(e)).collect()
    }
}
