//! Binary feature-grid files.
//!
//! Layout (little-endian): `b"EHFB"`, `u32` version, `u32` frame count,
//! then per frame `u32` id length, UTF-8 id, `u32` rows, `u32` cols and
//! `rows * cols` `f32` values.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FrameFeatures;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const FEATURES_MAGIC: &[u8; 4] = b"EHFB";
pub const FEATURES_VERSION: u32 = 1;

pub fn write_features<W: Write>(frames: &[FrameFeatures], mut w: W) -> Result<()> {
    w.write_all(FEATURES_MAGIC)?;
    w.write_all(&FEATURES_VERSION.to_le_bytes())?;
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    for f in frames {
        w.write_all(&(f.frame_id.len() as u32).to_le_bytes())?;
        w.write_all(f.frame_id.as_bytes())?;
        let (r, c) = f.grid.dims2();
        w.write_all(&(r as u32).to_le_bytes())?;
        w.write_all(&(c as u32).to_le_bytes())?;
        for &v in f.grid.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a features file. Values come back widened from `f32`.
pub fn read_features<R: Read>(mut r: R) -> Result<Vec<FrameFeatures>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURES_MAGIC {
        return Err(Error::Parse("features: bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FEATURES_VERSION {
        return Err(Error::Parse(format!("features: unsupported version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id)?;
        let frame_id = String::from_utf8(id).map_err(|e| Error::Parse(format!("features: frame id: {e}")))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            let v = f32::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::Parse(format!("features: non-finite value in frame `{frame_id}`")));
            }
            data.push(v as f64);
        }
        out.push(FrameFeatures {
            frame_id,
            grid: Tensor::matrix(rows, cols, data)?,
        });
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_features(frames: &[FrameFeatures], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_features(frames, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Vec<FrameFeatures>> {
    read_features(BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let f = FrameFeatures {
            frame_id: "ab".into(),
            grid: Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
        };
        let mut buf = Vec::new();
        write_features(std::slice::from_ref(&f), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"EHFB");
        assert_eq!(buf.len(), 12 + 4 + 2 + 8 + 16);
        assert_eq!(read_features(buf.as_slice()).unwrap(), vec![f]);
    }
}
