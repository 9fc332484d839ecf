//! Binary checkpoints: `RENTCKPT`, a `u32` format version, a `u64` header
//! length, a JSON header, then every parameter as little-endian `f64`s.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"RENTCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// In `f64` elements from the start of the data block.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub step: u64,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    vocab_hash: &str,
    step: u64,
) -> Result<()> {
    let path = path.as_ref();
    let mut offset = 0;
    let params = model
        .store
        .iter()
        .map(|p| {
            let e = ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
                len: p.value.len(),
            };
            offset += e.len;
            e
        })
        .collect();
    let header = CheckpointHeader {
        config: model.config.clone(),
        vocab_hash: vocab_hash.to_string(),
        step,
        params,
    };
    let json = serde_json::to_vec(&header)?;

    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for p in model.store.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointHeader)> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;

    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..data_start])?;
    let data = &bytes[data_start..];

    let mut model = Model::new(header.config.clone(), 0)?;
    if header.params.len() != model.store.len() {
        return Err(bad(&format!(
            "{} parameter blocks, model expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for entry in &header.params {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| bad(&format!("unknown parameter {}", entry.name)))?;
        let target = &mut model.store.get_mut(id).value;
        if target.shape() != entry.shape.as_slice() || entry.len != target.len() {
            return Err(bad(&format!(
                "parameter {} has shape {:?}, model expects {:?}",
                entry.name,
                entry.shape,
                target.shape()
            )));
        }
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        let chunk = data.get(start..end).ok_or_else(|| bad("truncated data"))?;
        for (dst, src) in target.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(src.try_into().unwrap());
        }
    }
    Ok((model, header))
}
