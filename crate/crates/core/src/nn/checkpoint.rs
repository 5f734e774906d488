//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `RMKCKPT\0`, u32 LE version, u64 LE header length,
//! a JSON header (format tag, model config, metadata, tensor index), then the
//! tensor payload as f32 LE in index order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::RemakeNet;
use super::params::{ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::io::atomic_write;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RMKCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "remake-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload in f32 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

/// Serializes parameters. Values are stored as f32.
pub fn encode_checkpoint(params: &ModelParams, metadata: &Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.tensors.len());
    let mut offset = 0;
    for t in &params.tensors {
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.data.len(),
        });
        offset += t.data.len();
    }
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        config: params.config.clone(),
        metadata: metadata.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parsed checkpoint: parameters (widened to f64) and the stored metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub metadata: Value,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format tag {:?}", header.format)));
    }
    let payload = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let end = (e.offset + e.len) * 4;
        if end > payload.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Checkpoint(format!("tensor {} out of bounds", e.name)));
        }
        let data = payload[e.offset * 4..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push(Tensor {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    let params = ModelParams {
        config: header.config,
        tensors,
    };
    RemakeNet::new(&params.config)?.check_params(&params)?;
    Ok(Checkpoint {
        params,
        metadata: header.metadata,
    })
}

/// Writes the checkpoint atomically and returns its SHA-256 as lowercase hex.
pub fn save_checkpoint(path: &Path, params: &ModelParams, metadata: &Value) -> Result<String> {
    let bytes = encode_checkpoint(params, metadata)?;
    atomic_write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Rounds every parameter to f32 precision, i.e. to exactly what a checkpoint stores.
pub fn round_to_f32(params: &mut ModelParams) {
    for t in &mut params.tensors {
        for v in &mut t.data {
            *v = *v as f32 as f64;
        }
    }
}
