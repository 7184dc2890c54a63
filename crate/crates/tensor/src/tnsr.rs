//! `TNSR` binary tensor files: magic `TNSR`, `u8` version (1), `u8` rank,
//! rank × `u32` little-endian dims, then row-major little-endian `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| TensorError::InvalidArgument(format!("rank {} too large", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| TensorError::InvalidArgument(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let truncated = |offset: usize, what: &str| TensorError::Format {
        offset,
        detail: format!("truncated while reading {what}"),
    };
    if bytes.len() < 6 {
        return Err(truncated(bytes.len(), "header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(TensorError::Format {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    if bytes[4] != VERSION {
        return Err(TensorError::Format {
            offset: 4,
            detail: format!("unsupported version {}", bytes[4]),
        });
    }
    let rank = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes.get(pos..pos + 4).ok_or_else(|| truncated(bytes.len(), "dims"))?;
        shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let need = pos + 4 * n;
    if bytes.len() < need {
        return Err(truncated(bytes.len(), "data"));
    }
    if bytes.len() > need {
        return Err(TensorError::Format {
            offset: need,
            detail: format!("{} trailing bytes", bytes.len() - need),
        });
    }
    let data = bytes[pos..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write<W: Write>(mut w: W, t: &Tensor<f32>) -> Result<()> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Tensor<f32>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&std::fs::read(path)?)
}
