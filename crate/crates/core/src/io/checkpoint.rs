//! Model checkpoints: named parameter tensors plus run metadata.
//!
//! Layout: magic "SGCK", u32 format version, u32 header length, a JSON
//! header (run config, epoch, seed, and a parameter directory with offsets
//! into the payload), then all parameter values concatenated as
//! little-endian f64. Saving the same state twice is byte-identical.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};

const MAGIC: &[u8; 4] = b"SGCK";
const VERSION: u32 = 1;

/// One named parameter with its shape and full-precision values.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Checkpoint contents; `config` carries the run config as opaque JSON.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub epoch: u32,
    pub seed: u64,
    pub params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: serde_json::Value,
    epoch: u32,
    seed: u64,
    params: Vec<HeaderParam>,
}

// offset and len count f64 elements, not bytes
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderParam {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

/// Write a checkpoint file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut directory = Vec::with_capacity(ckpt.params.len());
    let mut offset = 0u64;
    for p in &ckpt.params {
        let numel: usize = p.shape.iter().product();
        if numel != p.values.len() {
            return Err(SgError::invalid(
                "save_checkpoint",
                format!("param {}: shape implies {} values, got {}", p.name, numel, p.values.len()),
            ));
        }
        directory.push(HeaderParam {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            len: p.values.len() as u64,
        });
        offset += p.values.len() as u64;
    }
    let header = Header {
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        seed: ckpt.seed,
        params: directory,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut buf = Vec::with_capacity(12 + header_bytes.len() + 8 * offset as usize);
    buf.extend_from_slice(MAGIC);
    let mut word = [0u8; 4];
    LittleEndian::write_u32(&mut word, VERSION);
    buf.extend_from_slice(&word);
    LittleEndian::write_u32(&mut word, header_bytes.len() as u32);
    buf.extend_from_slice(&word);
    buf.extend_from_slice(&header_bytes);
    let mut wide = [0u8; 8];
    for p in &ckpt.params {
        for &v in &p.values {
            LittleEndian::write_f64(&mut wide, v);
            buf.extend_from_slice(&wide);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read and validate a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let name = path.display().to_string();
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(SgError::data(&name, "file shorter than the fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(SgError::data(&name, "bad magic, expected SGCK"));
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != VERSION {
        return Err(SgError::data(&name, format!("unsupported version {}", version)));
    }
    let header_len = LittleEndian::read_u32(&bytes[8..12]) as usize;
    if bytes.len() < 12 + header_len {
        return Err(SgError::data(&name, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| SgError::data(&name, e.to_string()))?;
    let payload = &bytes[12 + header_len..];

    let mut params = Vec::with_capacity(header.params.len());
    let mut expected_offset = 0u64;
    for hp in &header.params {
        let numel: u64 = hp.shape.iter().product::<usize>() as u64;
        if numel != hp.len {
            return Err(SgError::data(
                &name,
                format!("param {}: shape implies {} values, directory says {}", hp.name, numel, hp.len),
            ));
        }
        if hp.offset != expected_offset {
            return Err(SgError::data(
                &name,
                format!("param {}: offset {} breaks contiguity", hp.name, hp.offset),
            ));
        }
        expected_offset += hp.len;
    }
    if payload.len() as u64 != 8 * expected_offset {
        return Err(SgError::data(
            &name,
            format!("payload is {} bytes, directory implies {}", payload.len(), 8 * expected_offset),
        ));
    }
    for hp in &header.params {
        let start = 8 * hp.offset as usize;
        let end = start + 8 * hp.len as usize;
        let mut values = Vec::with_capacity(hp.len as usize);
        for chunk in payload[start..end].chunks_exact(8) {
            let v = LittleEndian::read_f64(chunk);
            if !v.is_finite() {
                return Err(SgError::data(&name, format!("non-finite value in param {}", hp.name)));
            }
            values.push(v);
        }
        params.push(CheckpointParam {
            name: hp.name.clone(),
            shape: hp.shape.clone(),
            values,
        });
    }
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        seed: header.seed,
        params,
    })
}
