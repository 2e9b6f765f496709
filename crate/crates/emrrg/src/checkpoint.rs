//! Checkpoint file:
//!
//! ```text
//! b"EMRRGCKP" | u32 schema version | u64 header length | JSON header | body
//! ```
//!
//! The header holds the model config, the vocabulary, a tensor directory
//! `(name, shape, offset)` and the sha256 of the body. The body is every
//! parameter as little-endian f32, in registration order.

use std::path::Path;

use emrrg_core::vocab::Vocabulary;
use emrrg_core::{EmrrgModel, ModelConfig, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{read, write, AppError, Result};
use crate::sha256_hex;

pub const MAGIC: &[u8; 8] = b"EMRRGCKP";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the body.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub tensors: Vec<TensorEntry>,
    pub body_sha256: String,
}

pub fn to_bytes(model: &EmrrgModel, vocab: &Vocabulary) -> Result<Vec<u8>> {
    if model.adapters.iter().any(|(_, a)| a.is_merged()) {
        return Err(AppError::Config(
            "unmerge adapters before saving a checkpoint".into(),
        ));
    }
    let mut body = Vec::with_capacity(model.params.total_numel() * 4);
    let mut tensors = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: body.len(),
        });
        for &v in p.value.data() {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = Header {
        config: model.cfg.clone(),
        vocab: vocab.clone(),
        tensors,
        body_sha256: sha256_hex(&body),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<(EmrrgModel, Vocabulary)> {
    let bad = |r: String| AppError::corrupt(path, r);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != SCHEMA_VERSION {
        return Err(bad(format!(
            "schema version {version}, expected {SCHEMA_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..body_start]).map_err(|e| bad(format!("header: {e}")))?;
    let body = &bytes[body_start..];
    if sha256_hex(body) != header.body_sha256 {
        return Err(bad("body checksum mismatch".into()));
    }
    let mut model = EmrrgModel::new(&header.config)?;
    if header.tensors.len() != model.params.len() {
        return Err(bad(format!(
            "{} tensors stored, config builds {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    for e in &header.tensors {
        let id = model
            .params
            .find(&e.name)
            .ok_or_else(|| bad(format!("unknown tensor `{}`", e.name)))?;
        let want = model.params.value(id).shape().to_vec();
        if want != e.shape {
            return Err(bad(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                e.name, e.shape, want
            )));
        }
        let n: usize = e.shape.iter().product();
        let raw = e
            .offset
            .checked_add(n * 4)
            .and_then(|end| body.get(e.offset..end))
            .ok_or_else(|| bad(format!("tensor `{}` runs past the body", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        *model.params.value_mut(id) = Tensor::new(&e.shape, data)?;
    }
    Ok((model, header.vocab))
}

pub fn save(path: &Path, model: &EmrrgModel, vocab: &Vocabulary) -> Result<Vec<u8>> {
    let bytes = to_bytes(model, vocab)?;
    write(path, &bytes)?;
    Ok(bytes)
}

pub fn load(path: &Path) -> Result<(EmrrgModel, Vocabulary)> {
    from_bytes(path, &read(path)?)
}
