//! Binary checkpoint format.
//!
//! ```text
//! "DFKD" | version: u32 LE | header_len: u64 LE | header: UTF-8 JSON
//! then, per tensor in lexicographic name order:
//!   name_len: u64 | name bytes | rank: u64 | dims: rank x u64 | data: f32 LE
//! ```
//!
//! The header is canonical JSON (sorted keys) holding the model config and the vocabulary.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, SeqModel, Vocab, Weights};
use crate::tensorfile::{read_tensors, write_tensor, Cursor};

pub const MAGIC: &[u8; 4] = b"DFKD";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: String,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

/// Canonical JSON: object keys sorted, no insignificant whitespace.
pub(crate) fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json::Value's default map is a BTreeMap, which sorts keys.
    serde_json::to_value(value).expect("value serializes").to_string()
}

pub fn to_bytes(model: &SeqModel) -> Vec<u8> {
    let header = canonical_json(&Header { config: model.config.clone(), vocab: model.vocab.as_string() });
    let mut out = Vec::with_capacity(64 + header.len() + model.config.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let mut params = model.weights.params();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    for p in params {
        write_tensor(&mut out, &p.name, &p.dims, p.data);
    }
    out
}

pub fn from_bytes(buf: &[u8]) -> Result<SeqModel, ModelError> {
    let mut cur = Cursor::new(buf);
    if cur.take(4, "magic").map_err(corrupt)? != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = cur.u32("version").map_err(corrupt)?;
    if version != VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: VERSION });
    }
    let header_len = cur.u64("header length").map_err(corrupt)?;
    if header_len > cur.remaining() as u64 {
        return Err(corrupt("header length exceeds file size"));
    }
    let header_bytes = cur.take(header_len as usize, "header").map_err(corrupt)?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("header: {e}")))?;
    let config = header.config;
    config.validate().map_err(|e| corrupt(e.to_string()))?;
    let vocab = Vocab::new(header.vocab.chars());
    if vocab.len() != config.vocab_size || vocab.symbols().len() != header.vocab.chars().count() {
        return Err(corrupt("vocabulary does not match vocab_size"));
    }
    // Refuse to allocate more than the file could possibly hold.
    let need = config.param_count().checked_mul(4).ok_or_else(|| corrupt("model too large"))?;
    if need > cur.remaining() {
        return Err(corrupt("file too short for the declared model"));
    }
    let tensors = read_tensors(&mut cur).map_err(corrupt)?;

    let mut weights = Weights::zeros(&config);
    let mut seen = 0;
    for p in weights.params_mut() {
        let t = tensors.get(&p.name).ok_or_else(|| corrupt(format!("missing tensor {}", p.name)))?;
        if t.dims != p.dims {
            return Err(corrupt(format!("tensor {} has shape {:?}, expected {:?}", p.name, t.dims, p.dims)));
        }
        let values = t.values().map_err(|e| corrupt(format!("tensor {}: {e}", p.name)))?;
        p.data.copy_from_slice(&values);
        seen += 1;
    }
    if seen != tensors.len() {
        return Err(corrupt("unexpected extra tensors"));
    }
    Ok(SeqModel { config, vocab, weights })
}

pub fn save_checkpoint(model: &SeqModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let bytes = to_bytes(model);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SeqModel, ModelError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
