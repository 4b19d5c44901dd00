//! Versioned binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MAMLABv\0"
//! version    u32
//! header     u32 length, then UTF-8 `key=value` lines
//! blocks     u32 count, then per block:
//!              u32 name length, name bytes,
//!              u32 rank, rank × u64 extents,
//!              numel × f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MAMLABv\0";
pub const FORMAT_VERSION: u32 = 1;

/// Header key-values plus ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub header: BTreeMap<String, String>,
    pub blocks: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.header.insert(key.into(), value.to_string());
    }

    pub fn header_value(&self, key: &str) -> Result<&str> {
        self.header.get(key).map(String::as_str).ok_or_else(|| Error::Format(format!("missing header key {key}")))
    }

    pub fn header_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.header_value(key)?;
        raw.parse().map_err(|_| Error::Format(format!("header key {key} has unparsable value {raw:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.blocks.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing block {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("header entry {k:?} cannot be encoded")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.blocks.len())?;
        for (name, t) in &self.blocks {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic; not a mamlab archive".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("header line {line:?} lacks '='")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflows".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("block {name} is too large")))?;
            if numel.checked_mul(8).map_or(true, |b| b > r.remaining()) {
                return Err(Error::Format(format!(
                    "block {name} truncated: expected {} bytes, found {}",
                    numel.saturating_mul(8),
                    r.remaining()
                )));
            }
            let data = r.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            blocks.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after last block", r.remaining())));
        }
        Ok(Self { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Appends every entry of `store` as `{prefix}{name}`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.push(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    /// Overwrites every entry of `store` from `{prefix}{name}` blocks.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let t = self.require(&format!("{prefix}{name}"))?;
            store.set(&name, t.clone()).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "truncated archive: needed {n} bytes at offset {}, found {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
