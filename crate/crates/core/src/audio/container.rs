//! Flat binary tensor container with a small versioned header.
//!
//! Layout: magic `VPTC`, u16 version, u8 dtype (0 = f64 little-endian),
//! u8 rank, rank x u32 dims, then the payload. Used to cache spectrograms
//! and synthetic features on disk.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VPTC";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(16 + tensor.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    let rank = tensor.shape().len();
    if rank > u8::MAX as usize {
        return Err(Error::Shape(format!("rank {rank} too large for container")));
    }
    out.push(rank as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(&format!("unsupported container version {version}")));
    }
    if bytes[6] != DTYPE_F64 {
        return Err(fail("unsupported dtype"));
    }
    let rank = bytes[7] as usize;
    let header = 8 + rank * 4;
    if bytes.len() < header {
        return Err(fail("truncated header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32::from_le_bytes(bytes[8 + i * 4..12 + i * 4].try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != header + n * 8 {
        return Err(fail(&format!(
            "payload size {} does not match shape {shape:?}",
            bytes.len() - header
        )));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data))
}
