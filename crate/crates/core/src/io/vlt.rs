//! VLT: a flat little-endian tensor container.
//!
//! ```text
//! magic  "VLT1"                 4 bytes
//! rank   u32 LE                 4 bytes
//! dims   rank x u32 LE
//! data   prod(dims) x f32 LE    row-major IEEE-754
//! ```

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VLT1";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take_u32(bytes: &[u8], at: &mut usize) -> Option<u32> {
    let b = bytes.get(*at..*at + 4)?;
    *at += 4;
    Some(u32::from_le_bytes(b.try_into().ok()?))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err("bad magic, expected VLT1".into());
    }
    let mut at = 4;
    let rank = take_u32(bytes, &mut at).ok_or("truncated header")? as usize;
    if rank == 0 {
        return Err("rank must be at least 1".into());
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(take_u32(bytes, &mut at).ok_or("truncated dims")? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("dimension product overflows")?;
    let payload = &bytes[at..];
    if payload.len() != count * 4 {
        return Err(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            payload.len(),
            count * 4
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Tensor::new(dims, data).map_err(|e| e.to_string())
}

pub fn write(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write_file(path.as_ref(), &encode(t))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode(&read_file(path)?).map_err(|msg| Error::format(path, msg))
}
