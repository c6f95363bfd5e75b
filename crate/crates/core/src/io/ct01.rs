//! CT01 tensor container: a minimal binary format for dense arrays.
//!
//! Layout: magic "CT01", one dtype byte (1 = f32), u32 rank, rank u32
//! extents, then the payload as little-endian f32 in row-major order.
//! Values are widened to f64 in memory and narrowed on write.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::diffcore::Tensor;
use crate::error::{Result, SgError};

const MAGIC: &[u8; 4] = b"CT01";
const DTYPE_F32: u8 = 1;

/// Serialize a tensor to a CT01 file.
pub fn write_ct01(path: &Path, tensor: &Tensor) -> Result<()> {
    let shape = tensor.shape();
    let data = tensor.data();
    let mut buf = Vec::with_capacity(4 + 1 + 4 + 4 * shape.len() + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.push(DTYPE_F32);
    let mut word = [0u8; 4];
    LittleEndian::write_u32(&mut word, shape.len() as u32);
    buf.extend_from_slice(&word);
    for &dim in shape {
        LittleEndian::write_u32(&mut word, dim as u32);
        buf.extend_from_slice(&word);
    }
    for &v in data {
        LittleEndian::write_f32(&mut word, v as f32);
        buf.extend_from_slice(&word);
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Read a CT01 file back into an f64 tensor.
pub fn read_ct01(path: &Path) -> Result<Tensor> {
    let name = path.display().to_string();
    let bytes = fs::read(path)?;
    if bytes.len() < 9 {
        return Err(SgError::data(&name, "file shorter than the fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(SgError::data(&name, "bad magic, expected CT01"));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(SgError::data(&name, format!("unsupported dtype tag {}", bytes[4])));
    }
    let rank = LittleEndian::read_u32(&bytes[5..9]) as usize;
    let header_len = 9 + 4 * rank;
    if bytes.len() < header_len {
        return Err(SgError::data(&name, "truncated extents"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 9 + 4 * i;
        shape.push(LittleEndian::read_u32(&bytes[off..off + 4]) as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() != 4 * numel {
        return Err(SgError::data(
            &name,
            format!("payload is {} bytes, extents imply {}", payload.len(), 4 * numel),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in payload.chunks_exact(4) {
        data.push(LittleEndian::read_f32(chunk) as f64);
    }
    Tensor::new(shape, data).map_err(|e| SgError::data(&name, e.to_string()))
}
