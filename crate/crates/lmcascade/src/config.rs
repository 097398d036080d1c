//! Run configuration: one JSON file with a section per module, plus
//! `key=value` overrides.

use std::fs;
use std::path::Path;

use lmcascade_core::cascade::{CascadeConfig, ScheduleConfig};
use lmcascade_core::phantom::{level_dims, PhantomSpec};
use lmcascade_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Number of phantoms generated by `gen` when `--n` is absent.
    pub n: usize,
    /// Train, validation and test counts; rescaled when `n` differs.
    pub split: [usize; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 60,
            split: [38, 8, 14],
        }
    }
}

impl DatasetConfig {
    /// Split of `n` phantoms in the configured proportions (largest
    /// remainder rounding, ties to the earlier split).
    pub fn split_for(&self, n: usize) -> [usize; 3] {
        let total: usize = self.split.iter().sum();
        if total == n {
            return self.split;
        }
        let exact: Vec<f64> = self.split.iter().map(|&c| c as f64 * n as f64 / total as f64).collect();
        let mut out: [usize; 3] = std::array::from_fn(|i| exact[i].floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        let mut rest = n - out.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            out[i] += 1;
            rest -= 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Monte-Carlo passes per case for noise-trained models.
    pub mc_passes: usize,
    pub confidence_level: f64,
    /// Report one noise-free pass instead of the Monte-Carlo mean.
    pub single_pass: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mc_passes: 50,
            confidence_level: 0.9,
            single_pass: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub dataset: DatasetConfig,
    pub cascade: CascadeConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Full-resolution setup: a 224 mm cube on a 0.5 mm base grid.
    fn default() -> Self {
        RunConfig {
            phantom: PhantomSpec {
                extent_mm: [224.0; 3],
                base_spacing: 0.5,
                junction_offset_mm: 36.0,
                jitter_mm: 12.0,
                ..PhantomSpec::default()
            },
            dataset: DatasetConfig::default(),
            cascade: CascadeConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> AppResult<()> {
        self.phantom.validate()?;
        self.cascade.validate()?;
        self.schedule.validate(self.cascade.scales.len())?;
        self.train.validate()?;
        let base = self.phantom.dims();
        let bs = self.phantom.base_spacing;
        let mut dims = Vec::new();
        for (s, &spacing) in self.cascade.scales.iter().enumerate() {
            let d = level_dims(base, bs, spacing)
                .map_err(|e| AppError::validation(format!("cascade.scales[{s}]"), e.to_string()))?;
            dims.push(d);
        }
        if dims[0] != self.cascade.patch_dims {
            return Err(AppError::validation(
                "cascade.patch_dims",
                format!(
                    "coarsest volume is {:?} voxels but patch_dims is {:?}",
                    dims[0], self.cascade.patch_dims
                ),
            ));
        }
        let level = self.cascade.single_scale_level().expect("validated");
        let div = self.cascade.single_scale.locnet.divisor();
        if dims[level].iter().any(|n| n % div != 0) {
            return Err(AppError::validation(
                "cascade.single_scale.locnet.depth",
                format!(
                    "volume {:?} at the single-scale level is not divisible by {div}",
                    dims[level]
                ),
            ));
        }
        if self.cascade.landmarks != 2 {
            return Err(AppError::validation(
                "cascade.landmarks",
                "phantoms carry exactly 2 landmarks",
            ));
        }
        let [tr, va, _] = self.dataset.split;
        if tr == 0 || va == 0 {
            return Err(AppError::validation(
                "dataset.split",
                "train and validation counts must be >= 1",
            ));
        }
        if self.dataset.n == 0 {
            return Err(AppError::validation("dataset.n", "must be >= 1"));
        }
        if self.eval.mc_passes < 2 {
            return Err(AppError::validation("eval.mc_passes", "must be >= 2"));
        }
        if !(self.eval.confidence_level > 0.0 && self.eval.confidence_level < 1.0) {
            return Err(AppError::validation("eval.confidence_level", "must be in (0, 1)"));
        }
        Ok(())
    }

    /// Parse a config document, apply overrides and validate.
    pub fn from_json_str(text: &str, overrides: &[String]) -> AppResult<RunConfig> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| AppError::validation("<file>", format!("invalid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            AppError::validation(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load `path` (defaults when `None`), apply overrides and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> AppResult<RunConfig> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| AppError::io(p, e))?,
            None => "{}".into(),
        };
        Self::from_json_str(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Apply `a.b.c=value`; the value is parsed as JSON, or taken as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> AppResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| AppError::Usage(format!("override `{spec}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(AppError::Usage(format!("override key `{key}` has an empty component")));
        }
        let obj = match node {
            Value::Object(m) => m,
            _ => return Err(AppError::validation(key, "parent is not an object")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Every config key with its default value, one `key = value` per line.
pub fn describe_defaults() -> String {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            Value::Array(items) if items.iter().any(|x| x.is_object()) => {
                for (i, x) in items.iter().enumerate() {
                    walk(&format!("{prefix}[{i}]"), x, out);
                }
            }
            other => out.push(format!("  {prefix} = {other}")),
        }
    }
    let mut lines = Vec::new();
    walk(
        "",
        &serde_json::to_value(RunConfig::default()).expect("config serializes"),
        &mut lines,
    );
    lines.join("\n")
}
