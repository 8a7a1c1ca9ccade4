//! Model checkpoints: `CKPT` magic, then a length-prefixed key=value config
//! block, then every parameter and buffer as (path, rows, cols, f32 payload).
//! All integers are little-endian u32; entries are written in path order.

use std::path::Path;

use super::params::ParamStore;
use super::tape::Mat;
use crate::dataio::KeyValues;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";

/// Prefix marking non-trainable entries inside the payload.
const BUFFER_TAG: &str = "buffer:";

pub fn encode_checkpoint(meta: &KeyValues, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let meta_text = meta.to_string();
    out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_text.as_bytes());
    let entries: Vec<(&str, &Mat)> = store.entries().collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, m) in entries {
        let stored = if store.is_buffer(name) {
            format!("{BUFFER_TAG}{name}")
        } else {
            name.to_string()
        };
        out.extend_from_slice(&(stored.len() as u32).to_le_bytes());
        out.extend_from_slice(stored.as_bytes());
        out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for &v in m.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.path, "non-UTF-8 string"))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(KeyValues, ParamStore)> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::format(path, "missing CKPT magic"));
    }
    let mut c = Cursor {
        bytes,
        pos: 4,
        path,
    };
    let meta = KeyValues::parse(&c.string()?, path)?;
    let n = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = c.string()?;
        let rows = c.u32()?;
        let cols = c.u32()?;
        let payload = c.take(rows * cols * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let m = Mat::from_shape_vec((rows, cols), data).expect("sized payload");
        match name.strip_prefix(BUFFER_TAG) {
            Some(buf) => store.insert_buffer(buf, m)?,
            None => store.insert(&name, m)?,
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    Ok((meta, store))
}

pub fn save_checkpoint(path: &Path, meta: &KeyValues, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(meta, store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(KeyValues, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_keeps_buffers_separate() {
        let mut store = ParamStore::new();
        store.insert("a/w", array![[1.5, -2.0], [0.25, 8.0]]).unwrap();
        store.insert_buffer("a/bn/running_mean", array![[0.5]]).unwrap();
        let mut meta = KeyValues::new();
        meta.set("heads", 8);
        let bytes = encode_checkpoint(&meta, &store);
        assert_eq!(&bytes[..4], b"CKPT");
        let (m2, s2) = decode_checkpoint(&bytes, Path::new("c")).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(s2, store);
        assert!(s2.is_buffer("a/bn/running_mean"));
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint(b"SPCD....", Path::new("c")).is_err());
        let mut bytes = encode_checkpoint(&KeyValues::new(), &ParamStore::new());
        bytes.push(0);
        assert!(decode_checkpoint(&bytes, Path::new("c")).is_err());
    }
}
