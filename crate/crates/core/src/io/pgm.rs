//! 16-bit binary PGM (P5) export of score maps.

use std::path::Path;

use super::write_file;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAXVAL: u32 = 65535;

/// Quantizes a score in `[0, 1]` to `round(s * 65535)`, clamping outliers.
pub fn quantize(s: f32) -> u16 {
    (s.clamp(0.0, 1.0) as f64 * MAXVAL as f64).round() as u16
}

/// Encodes an `[H x W]` map; samples are big-endian as the format requires.
pub fn encode(map: &Tensor<f32>) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::InvalidTensor(format!(
            "PGM export needs an [H x W] map, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.rows(), map.cols());
    let mut out = format!("P5\n{w} {h}\n{MAXVAL}\n").into_bytes();
    out.reserve(2 * h * w);
    for &s in map.data() {
        out.extend_from_slice(&quantize(s).to_be_bytes());
    }
    Ok(out)
}

pub fn write(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    write_file(path.as_ref(), &encode(map)?)
}

/// Reads back a file written by [`write`] as raw sample values.
pub fn decode(bytes: &[u8]) -> Option<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while bytes.get(at)?.is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while !bytes.get(at)?.is_ascii_whitespace() {
            at += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).ok()?);
    }
    at += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return None;
    }
    let w: usize = fields[1].parse().ok()?;
    let h: usize = fields[2].parse().ok()?;
    let samples = bytes
        .get(at..)?
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect::<Vec<_>>();
    (samples.len() == w * h).then_some((h, w, samples))
}
