//! On-disk tensor container for feature dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SGT1"  magic
//! u32     rank
//! u32 * rank   dimension sizes
//! f32 * n      row-major payload
//! ```
//!
//! Values are stored as f32: these files carry diagnostic feature maps and
//! logits, where 24 bits of mantissa are plenty and half the disk footprint.
//! Checkpoints, which must be exact, use their own f64 container (see
//! [`super::store`]).

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SGT1";

/// Serializes a tensor to the container format.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a tensor from container bytes, rejecting bad magic, truncation,
/// trailing bytes, and non-finite payloads.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let need = |at: usize, n: usize| -> Result<&[u8]> {
        bytes.get(at..at + n).ok_or_else(|| {
            Error::Format(format!(
                "truncated tensor container: wanted {n} bytes at offset {at}, total {}",
                bytes.len()
            ))
        })
    };
    if need(0, 4)? != MAGIC {
        return Err(Error::Format(format!(
            "bad tensor container magic {:?}",
            &bytes[..bytes.len().min(4)]
        )));
    }
    let rank = u32::from_le_bytes(need(4, 4)?.try_into().expect("4 bytes")) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut at = 8;
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(need(at, 4)?.try_into().expect("4 bytes")) as usize);
        at += 4;
    }
    let n = super::numel_of(&shape);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let v = f32::from_le_bytes(need(at, 4)?.try_into().expect("4 bytes"));
        data.push(v as f64);
        at += 4;
    }
    if at != bytes.len() {
        return Err(Error::Format(format!(
            "trailing bytes after tensor payload: {} extra",
            bytes.len() - at
        )));
    }
    Tensor::from_vec(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    tensor_from_bytes(&fs::read(path)?)
}
