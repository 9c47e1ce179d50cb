//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "HGFCKPT\0"
//! version      u32
//! desc_len     u32, then desc_len bytes of UTF-8 `key=value` lines
//! n_arrays     u32
//! per array:   name_len u32, name bytes, rank u32, rank x u64 dims,
//!              prod(dims) x f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{NnError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HGFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    /// Ordered description block.
    pub meta: BTreeMap<String, String>,
    arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.set("kind", kind);
        c
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| NnError::Checkpoint(format!("missing description key {key}")))
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.require(key)?
            .parse()
            .map_err(|_| NnError::Checkpoint(format!("key {key} is not a number")))
    }

    pub fn push_array(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        self.arrays.push((name, shape, data));
    }

    pub fn array(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let desc: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let desc_len = read_u32(&mut r)? as usize;
        let desc = read_string(&mut r, desc_len)?;
        let mut meta = BTreeMap::new();
        for line in desc.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NnError::Checkpoint(format!("bad description line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let count: usize = shape.iter().product();
            if count * 8 > r.len() {
                return Err(NnError::Checkpoint(format!("array {name} truncated")));
            }
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            arrays.push((name, shape, data));
        }
        if !r.is_empty() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { meta, arrays })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(NnError::Checkpoint("unexpected end of file".into()));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut &[u8], len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| NnError::Checkpoint("invalid utf-8".into()))
}
