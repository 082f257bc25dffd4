//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"MBLP"
//! version u32 (currently 1)
//! seed    u64 (store rng_seed)
//! record* name_len u32 | name utf-8 | frozen u8 | rank u32 |
//!         dims u32 x rank | dtype u8 | payload little-endian scalars
//! ```
//!
//! Records are written in lexicographic name order, so save -> load -> save
//! is byte-identical. A truncated or malformed file never yields a partial
//! store.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Dtype, Element, Tensor};

const MAGIC: &[u8; 4] = b"MBLP";
const VERSION: u32 = 1;

pub fn save_checkpoint<E: Element>(store: &ParamStore<E>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&store.rng_seed.to_le_bytes());
    for (name, entry) in store.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(u8::from(entry.frozen));
        let shape = entry.tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(E::DTYPE.tag());
        for &v in entry.tensor.data() {
            v.write_le(&mut buf);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<ParamStore<E>> {
    let buf = fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::checkpoint("bad magic bytes"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let seed = c.u64()?;
    let mut store = ParamStore::new(seed);
    while !c.done() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::checkpoint("parameter name is not utf-8"))?
            .to_string();
        let frozen = match c.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::checkpoint(format!("bad frozen flag {other}")));
            }
        };
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let dtype = Dtype::from_tag(c.u8()?)?;
        if dtype != E::DTYPE {
            return Err(Error::checkpoint(format!(
                "dtype mismatch for `{name}`: file has {dtype:?}, store expects {:?}",
                E::DTYPE
            )));
        }
        let numel: usize = shape.iter().product();
        let width = dtype.byte_width();
        let payload = c.take(numel * width)?;
        let data: Vec<E> = payload.chunks_exact(width).map(E::read_le).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::checkpoint(format!("record `{name}`: {e}")))?;
        store
            .insert(&name, tensor, frozen)
            .map_err(|e| Error::checkpoint(format!("{e}")))?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut ps = ParamStore::new(0xfeed);
        ps.insert(
            "vis.w",
            Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.25, 0.0, 3.5, -0.125]).unwrap(),
            true,
        )
        .unwrap();
        ps.insert("emb.b", Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false)
            .unwrap();
        ps.insert("tau", Tensor::scalar(-2.65926).unwrap(), false)
            .unwrap();
        ps
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mblp");
        let p2 = dir.path().join("b.mblp");
        let store = sample_store();
        save_checkpoint(&store, &p1).unwrap();
        let loaded: ParamStore<f32> = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.rng_seed, 0xfeed);
        assert!(loaded.is_frozen("vis.w").unwrap());
        assert!(!loaded.is_frozen("emb.b").unwrap());
        assert!(loaded.tensor("tau").unwrap().bit_eq(store.tensor("tau").unwrap()));
    }

    #[test]
    fn truncated_file_is_rejected_without_partial_store() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.mblp");
        save_checkpoint(&sample_store(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint::<f32>(&p);
        assert!(matches!(err, Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mblp");
        fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(load_checkpoint::<f32>(&p).is_err());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f32.mblp");
        save_checkpoint(&sample_store(), &p).unwrap();
        let err = load_checkpoint::<f64>(&p);
        assert!(matches!(err, Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v9.mblp");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"MBLP");
        buf.extend_from_slice(&9u32.to_le_bytes());
        buf.extend_from_slice(&0u64.to_le_bytes());
        fs::write(&p, buf).unwrap();
        let err = load_checkpoint::<f32>(&p);
        assert!(matches!(err, Err(Error::Checkpoint { .. })));
    }
}
