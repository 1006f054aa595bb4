//! TLAB binary tensor format.
//!
//! ```text
//! magic    4 bytes   "TLAB"
//! version  u32 LE    1
//! dtype    u32 LE    1 = f32, 2 = f64
//! rank     u32 LE
//! extents  rank × u64 LE
//! values   product(extents) little-endian elements of `dtype`
//! ```
//!
//! Reading into a different element type converts through `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::shape::numel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TLAB";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + t.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.tag().to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data().iter() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated TLAB stream".into())
    } else {
        Error::Io(e)
    }
}

/// Reads one tensor as an untracked leaf.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported TLAB version {version}")));
    }
    let tag = read_u32(r)?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(truncated)?;
        shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    let count = numel(&shape);
    let mut raw = vec![0u8; count * dtype.size_of()];
    r.read_exact(&mut raw).map_err(truncated)?;
    let data: Vec<T> = if dtype == T::DTYPE {
        raw.chunks_exact(dtype.size_of()).map(T::read_le).collect()
    } else {
        match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        }
    };
    Tensor::from_vec(data, &shape)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
