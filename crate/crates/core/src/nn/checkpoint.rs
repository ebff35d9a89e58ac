//! Versioned parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 B    magic "SIDERCKP"
//! u32    format version
//! u32+s  kind (UTF-8)
//! u32+s  meta (UTF-8 JSON, model architecture)
//! u32    tensor count n
//! u64    total parameter count
//! n ×    { u16+s name, u8 rank, rank × u32 dims }
//! n ×    raw f32 blocks in table order
//! 32 B   SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::layers::ParamStore;
use super::tensor::Tensor;
use crate::error::{Result, SiderError};

pub const MAGIC: &[u8; 8] = b"SIDERCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| SiderError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| SiderError::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value, params: ParamStore) -> Self {
        Self { kind: kind.into(), meta, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str32(&mut out, &self.kind);
        put_str32(&mut out, &self.meta.to_string());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.count() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 32 || &buf[..8] != MAGIC {
            return Err(SiderError::Checkpoint("bad magic".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(SiderError::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(SiderError::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind_len = r.u32()? as usize;
        let kind = r.string(kind_len)?;
        let meta_len = r.u32()? as usize;
        let meta: serde_json::Value = serde_json::from_str(&r.string(meta_len)?)?;
        let n = r.u32()? as usize;
        let total = r.u64()? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            table.push((name, dims));
        }
        let mut params = ParamStore::new();
        for (name, dims) in table {
            let len: usize = dims.iter().product();
            let raw = r.take(len * 4)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
            params.add(name, Tensor::new(dims, data));
        }
        if params.count() != total {
            return Err(SiderError::Checkpoint("parameter count mismatch".into()));
        }
        if r.pos != body.len() {
            return Err(SiderError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { kind, meta, params })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(SiderError::MissingCheckpoint(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies values into `store` by name; shapes must agree.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(SiderError::Checkpoint(format!(
                "expected {} tensors, checkpoint has {}",
                store.len(),
                self.params.len()
            )));
        }
        for (name, t) in self.params.iter() {
            let id = store.find(name).ok_or_else(|| SiderError::Checkpoint(format!("unexpected tensor {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(SiderError::Checkpoint(format!("shape mismatch for {name}")));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.add("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-3, 7.0]));
        p.add("a.bias", Tensor::new(vec![2], vec![0.5, -0.5]));
        Checkpoint::new("test", serde_json::json!({"width": 3}), p)
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta["width"], 3);
        let mut rounded = c.params.clone();
        rounded.round_to_f32();
        assert_eq!(back.params, rounded);
    }

    #[test]
    fn detects_corruption() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all, definitely not").is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_ok());
        assert!(matches!(Checkpoint::load(&dir.path().join("nope")), Err(SiderError::MissingCheckpoint(_))));
    }
}
