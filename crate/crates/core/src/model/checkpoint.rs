//! Binary checkpoint container.
//!
//! Layout: the magic `TREGCKPT`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, then every tensor's
//! values as little-endian `f64` in header order (parameters first, then
//! extra tensors such as optimizer moments).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, PolicyState, Role};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"TREGCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    role: Role,
    step: u64,
    params: Vec<TensorEntry>,
    extra: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Everything stored in one checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PolicyState,
    pub step: u64,
    /// Auxiliary tensors, e.g. `adam.m.<param>` and `adam.v.<param>`.
    pub extra: Vec<(String, Tensor)>,
    /// Free-form run state (metric history, RNG seeds, config snapshot).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: PolicyState) -> Self {
        Self {
            model,
            step: 0,
            extra: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn err(path: &Path, message: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let entry = |(n, t): (&str, &Tensor)| TensorEntry {
        name: n.to_string(),
        shape: t.shape().to_vec(),
    };
    let header = Header {
        config: ckpt.model.config().clone(),
        role: ckpt.model.role(),
        step: ckpt.step,
        params: ckpt.model.named_params().map(entry).collect(),
        extra: ckpt.extra.iter().map(|(n, t)| entry((n, t))).collect(),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let n_values: usize = ckpt.model.params().iter().chain(ckpt.extra.iter().map(|(_, t)| t)).map(Tensor::len).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in ckpt.model.params().iter().chain(ckpt.extra.iter().map(|(_, t)| t)) {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, ModelError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err(path, "not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(err(path, format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(hlen))
        .ok_or_else(|| err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| err(path, format!("header: {e}")))?;
    let mut cursor = 20 + hlen;
    let mut read = |entries: Vec<TensorEntry>| -> Result<Vec<(String, Tensor)>, ModelError> {
        entries
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let end = cursor + 8 * n;
                let raw = bytes.get(cursor..end).ok_or_else(|| err(path, format!("truncated tensor `{}`", e.name)))?;
                cursor = end;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let t = Tensor::new(e.shape, data).map_err(|x| err(path, x.to_string()))?;
                Ok((e.name, t))
            })
            .collect()
    };
    let params = read(header.params)?;
    let extra = read(header.extra)?;
    if cursor != bytes.len() {
        return Err(err(path, format!("{} trailing bytes", bytes.len() - cursor)));
    }
    let model = PolicyState::from_parts(header.config, params, header.role)?;
    Ok(Checkpoint {
        model,
        step: header.step,
        extra,
        meta: header.meta,
    })
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| err(path, e.to_string()))?;
    }
    let tmp = path.with_extension("tmp");
    let bytes = encode_checkpoint(ckpt);
    let mut f = fs::File::create(&tmp).map_err(|e| err(path, e.to_string()))?;
    f.write_all(&bytes).map_err(|e| err(path, e.to_string()))?;
    f.sync_all().map_err(|e| err(path, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| err(path, e.to_string()))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| err(path, e.to_string()))?;
    decode_checkpoint(&bytes, path)
}
