//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (architecture record, iteration, counters, tensor names and
//! shapes), then every tensor's data as little-endian `f64` in header
//! order. Writes go to a sibling temp file that is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PANODACK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: serde_json::Value,
    iteration: u64,
    counters: BTreeMap<String, u64>,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Everything that must match for the weights to be meaningful.
    pub arch: serde_json::Value,
    pub iteration: u64,
    pub counters: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            arch: self.arch.clone(),
            iteration: self.iteration,
            counters: self.counters.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let numel: usize = self.tensors.values().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * numel);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut data = &body[hlen..];
        let mut tensors = BTreeMap::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            if data.len() < 8 * n {
                return Err(Error::Checkpoint(format!("truncated data for `{name}`")));
            }
            let vals = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            data = &data[8 * n..];
            tensors.insert(name, Tensor::new(&shape, vals)?);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            arch: header.arch,
            iteration: header.iteration,
            counters: header.counters,
            tensors,
        })
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
        ));
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored architecture record equals `arch`.
    pub fn expect_arch(&self, arch: &serde_json::Value) -> Result<()> {
        if &self.arch != arch {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint has {}, run expects {}",
                self.arch, arch
            )));
        }
        Ok(())
    }

    /// Tensors under `<ns>/`, with the namespace stripped.
    pub fn namespace(&self, ns: &str) -> BTreeMap<String, Tensor> {
        let prefix = format!("{ns}/");
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}
