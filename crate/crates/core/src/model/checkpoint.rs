//! Checkpoint file layout:
//!
//! ```text
//! "ISCF"            4 bytes magic
//! version           u32 little-endian (= 1)
//! header_len        u64 little-endian
//! header            JSON: { "config": ModelConfig, "params": [{name, shape, offset}] }
//! payload           f32 little-endian values, parameters in manifest order;
//!                   `offset` is the byte offset of each parameter within the payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ISCF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

pub fn encode(params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let entries = params
        .iter()
        .map(|p| {
            let e = ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset };
            offset += 4 * p.value.numel() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { config: cfg.clone(), params: entries })
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let fmt = |m: &str| Error::Format(m.to_owned());
    if bytes.len() < 16 {
        return Err(fmt("file shorter than the fixed preamble"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).map_err(|_| fmt("header length overflow"))?)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fmt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut params = ModelParams::new();
    let mut expected_offset = 0u64;
    for e in &header.params {
        if e.offset != expected_offset {
            return Err(Error::Format(format!("parameter `{}` at offset {} (expected {expected_offset})", e.name, e.offset)));
        }
        let count = numel(&e.shape);
        let start = e.offset as usize;
        let end = start + 4 * count;
        if end > payload.len() {
            return Err(Error::Format(format!("payload truncated inside parameter `{}`", e.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let value = Tensor::new(e.shape.clone(), data)
            .map_err(|_| Error::ShapeMismatch(format!("parameter `{}` has invalid shape {:?}", e.name, e.shape)))?;
        params.insert(e.name.clone(), value).map_err(|err| Error::Format(err.to_string()))?;
        expected_offset = end as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(Error::Format(format!(
            "payload holds {} bytes but the manifest describes {expected_offset}",
            payload.len()
        )));
    }
    Ok((params, header.config))
}

pub fn save_checkpoint(params: &ModelParams, cfg: &ModelConfig, path: &Path) -> Result<()> {
    fs::write(path, encode(params, cfg)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    decode(&fs::read(path)?)
}

/// Load a checkpoint and verify it fits `cfg` exactly, naming the first
/// parameter that is missing, unexpected or differently shaped.
pub fn load_checkpoint_for(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let (loaded, _) = load_checkpoint(path)?;
    let expected = build(cfg)?;
    for p in expected.iter() {
        match loaded.get(&p.name) {
            None => return Err(Error::ShapeMismatch(format!("parameter `{}` missing from checkpoint", p.name))),
            Some(l) if l.value.shape() != p.value.shape() => {
                return Err(Error::ShapeMismatch(format!(
                    "parameter `{}`: config expects {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    l.value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = loaded.names().find(|n| expected.get(n).is_none()) {
        return Err(Error::ShapeMismatch(format!("checkpoint parameter `{extra}` is not part of the config")));
    }
    Ok(loaded)
}
