//! Versioned binary tensor record:
//!
//! ```text
//! "MSGR" | version: u32 LE | rank: u32 LE | extents: rank x u64 LE | data: f64 LE
//! ```

use std::io::{Read, Write};

use super::{Result, Shape, Tensor, TensorError};

pub const TENSOR_MAGIC: &[u8; 4] = b"MSGR";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.dims() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TENSOR_FORMAT_VERSION {
        return Err(TensorError::Format(format!(
            "unsupported version {version} (expected {TENSOR_FORMAT_VERSION})"
        )));
    }
    let rank = read_u32(r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(TensorError::Format(format!("unsupported rank {rank}")));
    }
    let mut extents = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        extents.push(read_u64(r)? as usize);
    }
    let shape = Shape::new(extents)?;
    let mut bytes = vec![0u8; shape.numel() * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::from_shape(shape, data)
}
