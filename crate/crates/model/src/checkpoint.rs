//! Checkpoint files: magic, a JSON header (format tag, version, network
//! configuration with its anchor spec, parameter table) and raw
//! little-endian `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::net::{Network, NetworkConfig};
use crate::{ModelError, Result};

pub const MAGIC: &[u8; 8] = b"MSLCKPT\0";
pub const CHECKPOINT_FORMAT: &str = "mslayout-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: NetworkConfig,
    params: Vec<Entry>,
}

/// Parsed checkpoint contents before they are bound to a network.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: net.config.clone(),
        params: net
            .params
            .params
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + net.params.num_values() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &net.params.params {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| ModelError::BadCheckpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(&format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(&format!("format tag {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let mut pos = header_end;
    let mut params = Vec::with_capacity(header.params.len());
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let end = pos + n * 4;
        if end > bytes.len() {
            return Err(bad(&format!("truncated data for {}", e.name)));
        }
        let values = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push((e.name, e.shape, values));
        pos = end;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
    })
}

/// Rebuilds the network the checkpoint was saved from. Every layer must be
/// present with its exact shape.
pub fn restore(ckpt: Checkpoint) -> Result<Network> {
    let mut net = Network::new(ckpt.config, 0);
    let mut found = vec![false; net.params.params.len()];
    for (name, shape, values) in ckpt.params {
        let id = net.params.find(&name).ok_or_else(|| ModelError::ShapeMismatch {
            layer: name.clone(),
            expected: Vec::new(),
            found: shape.clone(),
        })?;
        let p = &mut net.params.params[id.0];
        if p.shape != shape {
            return Err(ModelError::ShapeMismatch {
                layer: name,
                expected: p.shape.clone(),
                found: shape,
            });
        }
        p.value = values;
        found[id.0] = true;
    }
    if let Some(i) = found.iter().position(|f| !f) {
        return Err(ModelError::MissingLayer(net.params.params[i].name.clone()));
    }
    Ok(net)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(net)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    restore(read(path)?)
}

/// Copies every checkpoint layer whose name and shape match a layer of
/// `net`; returns how many layers were taken. Used for pretrained weights,
/// which typically cover only part of the network.
pub fn load_matching(net: &mut Network, ckpt: &Checkpoint) -> usize {
    let mut taken = 0;
    for (name, shape, values) in &ckpt.params {
        match net.params.find(name) {
            Some(id) if net.params.params[id.0].shape == *shape => {
                net.params.params[id.0].value.clone_from(values);
                taken += 1;
            }
            Some(id) => log::warn!(
                "pretrained layer {name} has shape {shape:?}, network expects {:?}; skipped",
                net.params.params[id.0].shape
            ),
            None => log::debug!("pretrained layer {name} has no counterpart"),
        }
    }
    taken
}
