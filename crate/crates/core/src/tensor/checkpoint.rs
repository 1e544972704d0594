//! Flat binary checkpoint for named f64 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"HMIL"
//! version u16 (currently 1)
//! count   u32
//! entry*: name_len u16, name (UTF-8), rank u8, dims u32 x rank,
//!         payload f64 x prod(dims)
//! ```
//!
//! Round-trips are bit-exact, including negative zero and subnormals.

use super::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"HMIL";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte 0: expected \"HMIL\"")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("truncated checkpoint: wanted {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid UTF-8 in parameter name at byte {offset}")]
    BadName { offset: usize },
}

pub fn save_checkpoint(
    path: &Path,
    entries: &[(String, Tensor<f64>)],
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f64>)>, CheckpointError> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name_off = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CheckpointError::BadName { offset: name_off })?
            .to_string();
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = cur.take(numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(&dims, data).expect("sized payload")));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tricky_tensor() -> Tensor<f64> {
        Tensor::new(
            &[2, 3],
            vec![-0.0, f64::MIN_POSITIVE, 1e308, -2.2250738585072014e-308, 0.1 + 0.2, -1.0],
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let entries = vec![
            ("embedder.conv1.w".to_string(), tricky_tensor()),
            ("classifier.b".to_string(), Tensor::scalar(0.25)),
        ];
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn save_twice_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let entries = vec![("w".to_string(), tricky_tensor())];
        save_checkpoint(&p1, &entries).unwrap();
        save_checkpoint(&p2, &entries).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn bad_magic_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), CheckpointError::BadMagic));
    }

    #[test]
    fn wrong_version_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&9u16.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &buf).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), CheckpointError::Version(9)));
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &[("w".to_string(), tricky_tensor())]).unwrap();
        let full = std::fs::read(&path).unwrap();
        let cut = &full[..full.len() - 5];
        let path2 = dir.path().join("cut.ckpt");
        std::fs::write(&path2, cut).unwrap();
        match load_checkpoint(&path2).unwrap_err() {
            CheckpointError::Truncated { offset, needed } => {
                assert!(offset > 0);
                assert!(needed > 0);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn empty_checkpoint_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        save_checkpoint(&path, &[]).unwrap();
        assert!(load_checkpoint(&path).unwrap().is_empty());
    }
}
