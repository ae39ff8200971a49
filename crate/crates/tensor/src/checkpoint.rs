//! Parameter checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic    4 bytes  "CFTN"
//! version  u32      1
//! count    u32
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   rank     u32, extents (u64 each)
//!   payload  f32 * product(extents)
//! ```
//!
//! Payloads are stored as `f32`; values round-trip through `f32` precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFTN";
pub const VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

pub fn write_params<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> TensorError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        TensorError::Format("truncated checkpoint".into())
    } else {
        TensorError::Io(e)
    }
}

/// Reads a checkpoint; every entry is marked trainable.
pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::Format(format!("tensor {name}: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(truncated)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| TensorError::Format(e.to_string()))?;
        store.add(name, t, true)?;
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    write_params(store, BufWriter::new(File::create(path)?))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore> {
    read_params(BufReader::new(File::open(path)?))
}
