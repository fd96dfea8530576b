//! Binary parameter checkpoints.
//!
//! Layout (little-endian): `b"EHCK"`, `u32` version, `u32` parameter count,
//! then per parameter `u32` name length, UTF-8 name, `u32` rank, `rank`
//! `u32` dimensions and the `f64` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse("checkpoint: bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("checkpoint: unsupported version {version}")));
    }
    let n = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Parse(format!("checkpoint: parameter name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        store.add(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice()).map_err(|e| match e {
        Error::Parse(reason) | Error::Format { reason, .. } => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        Error::Io(io) => Error::Format {
            path: path.to_path_buf(),
            reason: io.to_string(),
        },
        other => other,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
