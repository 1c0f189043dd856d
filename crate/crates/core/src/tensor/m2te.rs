//! Binary tensor exchange format.
//!
//! Layout, all little-endian: magic `M2TE`, `u8` version (1), `u8` dtype
//! (1 = f64, 2 = f32), `u32` rank, `rank x u64` dims, then the row-major
//! payload. Writers emit f64; readers accept both dtypes and upcast f32.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"M2TE";
const VERSION: u8 = 1;

/// Supported payload datatypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 1,
            Dtype::F32 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Dtype> {
        match code {
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::F32),
            other => Err(Error::Format(format!("unknown tensor dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// Serializes a tensor into an in-memory blob.
pub fn encode(shape: &[usize], data: &[f64], dtype: Dtype) -> Result<Vec<u8>> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Shape {
            op: "m2te_encode",
            lhs: shape.to_vec(),
            rhs: vec![data.len()],
        });
    }
    let mut out = Vec::with_capacity(10 + 8 * shape.len() + dtype.width() * data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => {
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Format("truncated tensor blob".into()));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

/// Parses a blob produced by [`encode`] (either dtype).
pub fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut cur: &[u8] = bytes;

    if take(&mut cur, 4)? != MAGIC {
        return Err(Error::Format("bad tensor magic, expected M2TE".into()));
    }
    let version = take(&mut cur, 1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor format version {version}"
        )));
    }
    let dtype = Dtype::from_code(take(&mut cur, 1)?[0])?;
    let rank = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        shape.push(d);
    }
    let payload_len = numel
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let payload = take(&mut cur, payload_len)?;
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((shape, data))
}

/// Writes a tensor file with an f64 payload.
pub fn write_file(path: impl AsRef<Path>, shape: &[usize], data: &[f64]) -> Result<()> {
    write_file_as(path, shape, data, Dtype::F64)
}

/// Writes a tensor file with an explicit payload dtype.
pub fn write_file_as(
    path: impl AsRef<Path>,
    shape: &[usize],
    data: &[f64],
    dtype: Dtype,
) -> Result<()> {
    let path = path.as_ref();
    let blob = encode(shape, data, dtype)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&blob).map_err(|e| Error::io(path, e))
}

/// Reads a tensor file written by [`write_file`] or [`write_file_as`].
pub fn read_file(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
