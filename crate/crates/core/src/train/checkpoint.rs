//! Parameter checkpoints. Little-endian:
//!
//! ```text
//! "ARGW" u32:version u64:config_hash u32:count
//! count x ( u32:name_len name u32:rank u32[rank]:shape f64[numel]:data )
//! u32:crc32(all previous bytes)
//! ```

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::model::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ARGW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// First 8 bytes (little-endian) of the SHA-256 of the JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> u64 {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(json);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn checkpoint_bytes(params: &ParamStore, config_hash: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn write_checkpoint(path: &Path, params: &ParamStore, config_hash: u64) -> Result<()> {
    fs::write(path, checkpoint_bytes(params, config_hash))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: "truncated checkpoint".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Returns the stored config hash and the parameters.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(u64, ParamStore)> {
    let format = |offset: usize, reason: String| Error::Format {
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 24 {
        return Err(format(bytes.len(), "truncated checkpoint".into()));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format(0, "bad checkpoint magic".into()));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(format(body, format!("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")));
    }
    let mut c = Cursor {
        bytes: &bytes[..body],
        pos: 4,
    };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format(4, format!("unsupported checkpoint version {version}")));
    }
    let hash = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes"));
    let count = c.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = c.pos;
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| format(at, "parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(8).ok_or_else(|| format(at, "tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| format(at, format!("parameter {name}: {e}")))?;
        store.insert(name, t).map_err(|e| format(at, e.to_string()))?;
    }
    if c.pos != body {
        return Err(format(c.pos, "trailing bytes in checkpoint".into()));
    }
    Ok((hash, store))
}

pub fn read_checkpoint(path: &Path) -> Result<(u64, ParamStore)> {
    parse_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and checks it was written for `expected_hash`.
pub fn load_compatible(path: &Path, expected_hash: u64) -> Result<ParamStore> {
    let (hash, store) = read_checkpoint(path)?;
    if hash != expected_hash {
        return Err(Error::Incompatible(format!(
            "checkpoint config hash {hash:016x} does not match {expected_hash:016x}"
        )));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, AblationFlags, ModelConfig};

    #[test]
    fn round_trip_and_hash_check() {
        let cfg = ModelConfig::new(8, 3, AblationFlags::full());
        let params = init_params(&cfg, 1).unwrap();
        let h = config_hash(&cfg);
        let bytes = checkpoint_bytes(&params, h);
        assert_eq!(parse_checkpoint(&bytes).unwrap(), (h, params.clone()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.argw");
        write_checkpoint(&path, &params, h).unwrap();
        assert_eq!(load_compatible(&path, h).unwrap(), params);
        assert!(matches!(load_compatible(&path, h ^ 1), Err(Error::Incompatible(_))));
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = ModelConfig::new(8, 2, AblationFlags::from_letter('A').unwrap());
        let bytes = checkpoint_bytes(&init_params(&cfg, 2).unwrap(), 7);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert!(matches!(parse_checkpoint(&bad), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = ModelConfig::new(8, 2, AblationFlags::full());
        let b = ModelConfig { heads: 2, ..a.clone() };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
