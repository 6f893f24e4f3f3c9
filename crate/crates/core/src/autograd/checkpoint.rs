//! Little-endian binary tensor container.
//!
//! ```text
//! magic    4 bytes  "FSPT"
//! version  u32      1
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (rank x u64)
//!   payload  product(dims) x f64
//! ```
//!
//! Values are widened to `f64` on write, so `f32` and `f64` tensors both
//! round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"FSPT";
pub const VERSION: u32 = 1;

/// Exact encoded length of a set of tensors, without encoding them.
pub fn encoded_len<'a, T: Scalar + 'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> usize {
    let mut n = 4 + 4 + 4;
    for (name, t) in tensors {
        n += 4 + name.len() + 4 + 8 * t.shape().len() + 8 * t.numel();
    }
    n
}

pub fn write_tensors<'a, T: Scalar + 'a, W: Write>(
    w: &mut W,
    tensors: &[(String, &'a Tensor<T>)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes())?;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn to_bytes<T: Scalar>(tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensors(&mut out, tensors).expect("writing to a Vec cannot fail");
    out
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

pub fn read_tensors<T: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", magic)));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {}", version)));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u32(r)? as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let mut raw = vec![0u8; 8 * n];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut cur = bytes;
    let out = read_tensors(&mut cur)?;
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cur.len())));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    fs::write(path, to_bytes(tensors))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}
