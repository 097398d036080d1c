//! `.vol` files: raw little-endian f32 payload plus a `.vol.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use lmcascade_core::{Geometry, Volume};
use serde::{Deserialize, Serialize};

pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub channels: usize,
    pub dtype: String,
    pub version: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum VolError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed header: {msg}")]
    MalformedHeader { path: PathBuf, msg: String },
    #[error("{path}: unsupported dtype `{dtype}` (expected `{DTYPE}`)")]
    UnsupportedDtype { path: PathBuf, dtype: String },
    #[error("{path}: payload has {actual} bytes, header implies {expected}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
}

impl From<VolError> for crate::AppError {
    fn from(e: VolError) -> Self {
        crate::AppError::Runtime(e.to_string())
    }
}

/// Sidecar path of a payload path: `a/b.vol` -> `a/b.vol.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> VolError + '_ {
    move |source| VolError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_volume(vol: &Volume, path: &Path) -> Result<(), VolError> {
    let header = Header {
        dims: vol.dims(),
        spacing: vol.spacing(),
        origin: vol.origin(),
        channels: vol.channels(),
        dtype: DTYPE.into(),
        version: crate::FORMAT_VERSION,
    };
    let mut bytes = Vec::with_capacity(vol.data().len() * 4);
    for v in vol.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io(path))?;
    let side = sidecar(path);
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&side, json + "\n").map_err(io(&side))?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<Header, VolError> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(io(&side))?;
    let malformed = |msg: String| VolError::MalformedHeader {
        path: side.clone(),
        msg,
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if let Some(d) = value.get("dtype").and_then(|d| d.as_str()) {
        if d != DTYPE {
            return Err(VolError::UnsupportedDtype {
                path: side.clone(),
                dtype: d.into(),
            });
        }
    }
    let h: Header = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if h.version != crate::FORMAT_VERSION {
        return Err(malformed(format!("unsupported version {}", h.version)));
    }
    Ok(h)
}

pub fn read_volume(path: &Path) -> Result<Volume, VolError> {
    let h = read_header(path)?;
    let malformed = |msg: String| VolError::MalformedHeader {
        path: sidecar(path),
        msg,
    };
    let expected = h
        .dims
        .iter()
        .chain(std::iter::once(&h.channels))
        .try_fold(4usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| malformed("dims overflow".into()))?;
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() != expected {
        return Err(VolError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let geom = Geometry::new(h.spacing, h.origin).map_err(|e| malformed(e.to_string()))?;
    Volume::new(h.dims, geom, h.channels, data).map_err(|e| malformed(e.to_string()))
}
