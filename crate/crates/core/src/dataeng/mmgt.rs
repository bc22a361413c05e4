//! MMGT tensor files.
//!
//! Layout: `b"MMGT"`, version byte `1`, dtype byte, rank byte, `rank` dims
//! as little-endian `u32`, then the row-major little-endian payload.
//! Dtype `0` is `f32` (dataset tensors), `1` is `f64` (checkpoints).

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 4] = b"MMGT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(c: u8) -> std::result::Result<Self, FormatError> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(FormatError::UnknownDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Invalid(format!("rank {} too large for MMGT", t.rank())))?;
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + dtype.width() * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), rank]);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                let x = v as f32;
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("{v} does not fit in f32")));
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], FormatError> {
    if buf.len() < n {
        return Err(FormatError::Truncated);
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn decode_raw(bytes: &[u8]) -> std::result::Result<(Vec<usize>, Vec<f64>, Dtype), FormatError> {
    let mut buf = bytes;
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    take(&mut buf, 4)?;
    let header = take(&mut buf, 3)?;
    if header[0] != VERSION {
        return Err(FormatError::UnsupportedVersion(header[0]));
    }
    let dtype = Dtype::from_code(header[1])?;
    let rank = header[2] as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let raw = take(&mut buf, 4)?;
        let d = u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(FormatError::ZeroDim);
        }
        count = count.checked_mul(d).ok_or(FormatError::DimsOverflow)?;
        dims.push(d);
    }
    let nbytes = count
        .checked_mul(dtype.width())
        .ok_or(FormatError::DimsOverflow)?;
    let payload = take(&mut buf, nbytes)?;
    if !buf.is_empty() {
        return Err(FormatError::TrailingBytes);
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok((dims, data, dtype))
}

/// Decodes a buffer; `path` is only used to label errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Tensor, Dtype)> {
    let (dims, data, dtype) = decode_raw(bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })?;
    let t = Tensor::new(dims, data).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite(path.display().to_string()),
        other => other,
    })?;
    Ok((t, dtype))
}

pub fn write_tensor_as(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let bytes = encode_tensor(t, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a dataset tensor (32-bit payload).
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_tensor_as(path, t, Dtype::F32)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_tensor(&bytes, path)?.0)
}
