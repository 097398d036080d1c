//! Checkpoint files: `LMCK`, u32 version, u64 header length, JSON header,
//! then little-endian f32 payloads.

use std::fs;
use std::path::Path;

use lmcascade_core::cascade::{Architecture, Model};
use lmcascade_core::diffgraph::Shape;
use lmcascade_core::optim::AdamState;
use lmcascade_core::train::{Mode, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{AppError, AppResult, FORMAT_VERSION};

pub const MAGIC: &[u8; 4] = b"LMCK";

/// Best validation result seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub epoch: usize,
    pub val_error_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// Master seed; shuffle and noise streams derive from it and the epoch.
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    /// `[channels, nx, ny, nz]`.
    pub shape: [usize; 4],
    /// Byte offset into the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: RunConfig,
    pub mode: Mode,
    pub architecture: Architecture,
    /// Next epoch to run.
    pub epoch: usize,
    pub best: Option<Best>,
    pub rng: RngState,
    pub adam_steps: Vec<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub trainer: Trainer,
    pub best: Option<Best>,
}

impl Checkpoint {
    pub fn model(&self) -> &Model {
        &self.trainer.model
    }

    pub fn mode(&self) -> Mode {
        self.trainer.train.mode
    }
}

fn tensors(t: &Trainer) -> Vec<(String, Shape, &[f32])> {
    let mut out = Vec::new();
    for (s, net) in t.model.nets.iter().enumerate() {
        for p in &net.params {
            out.push((format!("net{s}.{}", p.name), p.shape, &p.data[..]));
        }
    }
    for (s, net) in t.model.nets.iter().enumerate() {
        for (i, p) in net.params.iter().enumerate() {
            out.push((format!("adam.m.net{s}.{}", p.name), p.shape, &t.adam[s].m[i][..]));
            out.push((format!("adam.v.net{s}.{}", p.name), p.shape, &t.adam[s].v[i][..]));
        }
    }
    out
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let t = &ck.trainer;
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, data) in tensors(t) {
        entries.push(TensorEntry {
            name,
            shape: [shape.channels, shape.dims[0], shape.dims[1], shape.dims[2]],
            offset: payload.len(),
            len: data.len(),
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: ck.config.clone(),
        mode: t.train.mode,
        architecture: t.model.architecture,
        epoch: t.epoch,
        best: ck.best,
        rng: RngState {
            seed: t.train.seed,
            epoch: t.epoch,
        },
        adam_steps: t.adam.iter().map(|a| a.t).collect(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> AppError {
    AppError::Runtime(format!("{}: invalid checkpoint: {msg}", path.display()))
}

pub fn decode_header(bytes: &[u8], path: &Path) -> AppResult<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad(path, "missing LMCK magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(path, e))?;
    Ok((header, end))
}

pub fn decode(bytes: &[u8], path: &Path) -> AppResult<Checkpoint> {
    let (h, start) = decode_header(bytes, path)?;
    let payload = &bytes[start..];
    let mut trainer = Trainer::new(
        h.config.train.clone(),
        h.config.cascade.clone(),
        h.config.schedule.clone(),
    )
    .map_err(|e| bad(path, e))?;
    if trainer.model.architecture != h.architecture || h.mode != h.config.train.mode {
        return Err(bad(path, "mode does not match the stored config"));
    }
    let expected = tensors(&trainer);
    if expected.len() != h.tensors.len() {
        return Err(bad(
            path,
            format!("{} tensors, model needs {}", h.tensors.len(), expected.len()),
        ));
    }
    let mut values = Vec::with_capacity(expected.len());
    for ((name, shape, data), e) in expected.iter().zip(&h.tensors) {
        let want = [shape.channels, shape.dims[0], shape.dims[1], shape.dims[2]];
        if *name != e.name || want != e.shape || data.len() != e.len {
            return Err(bad(
                path,
                format!("tensor `{}` does not match `{name}` {want:?}", e.name),
            ));
        }
        let bytes = e
            .offset
            .checked_add(4 * e.len)
            .and_then(|end| payload.get(e.offset..end))
            .ok_or_else(|| bad(path, format!("tensor `{name}` runs past the payload")))?;
        values.push(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect::<Vec<f32>>(),
        );
    }
    if h.adam_steps.len() != trainer.adam.len() {
        return Err(bad(path, "optimizer state does not match the model"));
    }
    let mut it = values.into_iter();
    for net in trainer.model.nets.iter_mut() {
        for p in net.params.iter_mut() {
            p.data = it.next().expect("counted");
        }
    }
    for (s, net) in trainer.model.nets.iter().enumerate() {
        let n = net.params.len();
        let mut st = AdamState::new(&net.params);
        st.t = h.adam_steps[s];
        for i in 0..n {
            st.m[i] = it.next().expect("counted");
            st.v[i] = it.next().expect("counted");
        }
        trainer.adam[s] = st;
    }
    trainer.epoch = h.epoch;
    Ok(Checkpoint {
        config: h.config,
        trainer,
        best: h.best,
    })
}

/// Write atomically through a temporary sibling file.
pub fn save(ck: &Checkpoint, path: &Path) -> AppResult<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, encode(ck)).map_err(|e| AppError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

pub fn load(path: &Path) -> AppResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes, path)
}
