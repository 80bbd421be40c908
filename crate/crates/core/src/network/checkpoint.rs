//! Checkpoint files.
//!
//! Layout: magic `CKPT`, `u32` LE version, `u64` LE header length, a JSON
//! header `{config, params: [{name, shape, offset}]}`, then every parameter
//! as raw `f64` LE values at `offset` bytes past the end of the header.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, NetworkError, Param, Result};

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<Entry>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut offset = 0u64;
    let mut params = Vec::with_capacity(model.params.len());
    for (name, p) in &model.params {
        params.push(Entry {
            name: name.clone(),
            shape: p.shape.clone(),
            offset,
        });
        offset += 8 * p.data.len() as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        params,
    })
    .expect("header is serializable");
    let mut buf = Vec::with_capacity(16 + header.len() + offset as usize);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in model.params.values() {
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let err = |msg: &str| NetworkError::Checkpoint {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let buf = fs::read(path)?;
    if buf.len() < 16 || &buf[..4] != CKPT_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize.checked_add(hlen).filter(|&e| e <= buf.len()).ok_or_else(|| err("truncated header"))?;
    let header: Header = serde_json::from_slice(&buf[16..body_start]).map_err(|e| err(&e.to_string()))?;
    let body = &buf[body_start..];
    let mut params = BTreeMap::new();
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let bytes = body.get(start..start + 8 * n).ok_or_else(|| err(&format!("truncated data for {}", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name, Param { shape: e.shape, data });
    }
    Model::from_params(header.config, params)
}
