//! The ITF tensor file format.
//!
//! Layout: magic `ITF1`, one `u8` rank, `rank` little-endian `u32` dimensions,
//! then `product(dims)` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ITF1";

/// Serializes `t`, narrowing values to `f32`.
pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(u8::try_from(t.rank()).expect("tensor rank fits in u8"));
    for &d in t.shape() {
        out.extend_from_slice(
            &u32::try_from(d)
                .expect("dimension fits in u32")
                .to_le_bytes(),
        );
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses one tensor from the front of `bytes`, returning it and the bytes consumed.
pub(crate) fn decode(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    if bytes.len() < 5 {
        return Err("truncated ITF header".into());
    }
    if &bytes[..4] != MAGIC {
        return Err("bad ITF magic".into());
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err("ITF rank must be positive".into());
    }
    let mut pos = 5;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| "truncated ITF dimensions".to_string())?;
        let d = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        if d == 0 {
            return Err("ITF dimension of zero".into());
        }
        shape.push(d);
        pos += 4;
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| "ITF shape overflows".to_string())?;
    let body = n
        .checked_mul(4)
        .and_then(|len| bytes.get(pos..pos + len))
        .ok_or_else(|| "truncated ITF data".to_string())?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((Tensor::from_parts(shape, data), pos + 4 * n))
}

/// Parses a buffer that holds exactly one tensor.
pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let (t, used) = decode(bytes)?;
    if used != bytes.len() {
        return Err(format!(
            "{} trailing bytes after ITF tensor",
            bytes.len() - used
        ));
    }
    Ok(t)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|reason| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    })
}
