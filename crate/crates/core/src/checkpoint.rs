//! Versioned binary container for named `f32` arrays plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"M2TCKPT1"
//! u64 meta_len, meta_len bytes of UTF-8 JSON
//! u64 array_count
//! per array: u32 name_len, name, u32 ndim, ndim × u64 extents, f32 values
//! ```

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"M2TCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("checkpoint truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(LittleEndian::read_u32(self.take(4, what)?) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        usize::try_from(LittleEndian::read_u64(self.take(8, what)?)).map_err(|_| Error::Format(format!("{what} too large")))
    }
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    /// Appends every tensor of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.arrays.push((format!("{prefix}{name}"), t.clone()));
        }
    }

    /// Arrays under `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.arrays
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut b8 = [0u8; 8];
        let mut b4 = [0u8; 4];
        LittleEndian::write_u64(&mut b8, meta.len() as u64);
        out.extend_from_slice(&b8);
        out.extend_from_slice(&meta);
        LittleEndian::write_u64(&mut b8, self.arrays.len() as u64);
        out.extend_from_slice(&b8);
        for (name, t) in &self.arrays {
            LittleEndian::write_u32(&mut b4, name.len() as u32);
            out.extend_from_slice(&b4);
            out.extend_from_slice(name.as_bytes());
            LittleEndian::write_u32(&mut b4, t.ndim() as u32);
            out.extend_from_slice(&b4);
            for &n in t.shape() {
                LittleEndian::write_u64(&mut b8, n as u64);
                out.extend_from_slice(&b8);
            }
            let start = out.len();
            out.resize(start + 4 * t.numel(), 0);
            LittleEndian::write_f32_into(t.data(), &mut out[start..]);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let meta_len = r.u64("metadata length")?;
        let meta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let count = r.u64("array count")?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let n = r.u32("name length")?;
            let name = String::from_utf8(r.take(n, "name")?.to_vec()).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let ndim = r.u32("rank")?;
            let shape = (0..ndim).map(|_| r.u64("extent")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &n| a.checked_mul(n)).ok_or_else(|| Error::Format("array too large".into()))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?, &name)?;
            let mut data = vec![0f32; numel];
            LittleEndian::read_f32_into(raw, &mut data);
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    /// Reads a checkpoint and returns it with the SHA-256 of the file bytes.
    pub fn read(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let ck = Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Json(j) => Error::Format(format!("{}: metadata: {j}", path.display())),
            other => other,
        })?;
        Ok((ck, sha256_hex(&bytes)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
