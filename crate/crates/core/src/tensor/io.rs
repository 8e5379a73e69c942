//! `.ten` binary tensor container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "CMRT" | version: u16 | rank: u8 | dims: rank x u32 | payload: f64 x prod(dims)
//! ```
//!
//! Tensors are written with rank 4. Files of rank 1-3 are accepted on read and
//! padded with leading unit dimensions.

use std::fs;
use std::path::Path;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CMRT";
pub const VERSION: u16 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let dims = t.shape().dims();
    let mut out = Vec::with_capacity(7 + 4 * dims.len() + 8 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 7 {
        return Err(Error::Format(format!("{} bytes is too short for a header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"CMRT\"", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let rank = bytes[6] as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::Format(format!("rank {rank} not in 1..=4")));
    }
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated dimension list".into()));
    }
    let mut dims = [1usize; 4];
    for i in 0..rank {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4-byte slice"));
        dims[4 - rank + i] = d as usize;
    }
    let shape = Shape::from_dims(dims);
    let payload = &bytes[header..];
    if payload.len() != 8 * shape.numel() {
        return Err(Error::Format(format!(
            "payload holds {} bytes but shape {shape} needs {}",
            payload.len(),
            8 * shape.numel()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
