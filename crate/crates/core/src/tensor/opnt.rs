//! Raw tensor container: `OPNT` magic, u32 LE rank, rank × u32 LE extents,
//! then the row-major f32 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"OPNT";

/// Encoded size in bytes of a tensor with `shape`.
pub fn encoded_len(shape: &[usize]) -> usize {
    8 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn write_tensor<T: Element, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.len());
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn to_bytes<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(t.shape()));
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Read one tensor. `origin` only labels errors.
pub fn read_tensor<R: Read>(r: &mut R, origin: &Path) -> Result<Tensor<f32>> {
    let truncated = |e: std::io::Error| Error::format(origin, format!("truncated OPNT stream: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != MAGIC {
        return Err(Error::format(origin, format!("bad magic {magic:?}")));
    }
    let rank = read_u32(r).map_err(truncated)? as usize;
    if rank > 16 {
        return Err(Error::format(origin, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r).map_err(truncated)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; 4 * n];
    r.read_exact(&mut payload).map_err(truncated)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(data, &shape).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cursor = bytes;
    read_tensor(&mut cursor, Path::new("<memory>"))
}

pub fn save<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r, path)
}
