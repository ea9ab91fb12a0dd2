//! Single-file binary checkpoints.
//!
//! Layout: magic `QSCK`, format version (u32 LE), header length (u64 LE),
//! JSON header, then every tensor's values as f64 LE in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"QSCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    config_hash: String,
    config: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub step: u64,
    pub config_hash: String,
    /// The run configuration as TOML.
    pub config: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, step: u64, config_hash: String, config: String) -> Self {
        Self {
            kind: kind.to_string(),
            step,
            config_hash,
            config,
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn put(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Checkpoint {
            path: Default::default(),
            detail: format!("tensor {name} missing from {} checkpoint", self.kind),
        })
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.put(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Copies every parameter of `store` from tensors named `prefix/<name>`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let mut loaded = ParamStore::new();
        for (name, _) in store.iter() {
            loaded.add(name, self.require(&format!("{prefix}/{name}"))?.clone());
        }
        store.load_from(&loaded).map_err(|detail| Error::Checkpoint {
            path: Default::default(),
            detail,
        })
    }

    pub fn put_adam(&mut self, prefix: &str, opt: &Adam, store: &ParamStore) {
        for ((name, _), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
            self.put(format!("{prefix}.m/{name}"), m.clone());
            self.put(format!("{prefix}.v/{name}"), v.clone());
        }
        self.put(format!("{prefix}.step"), Tensor::scalar(opt.step as f64));
    }

    pub fn load_adam(&self, prefix: &str, store: &ParamStore) -> Result<Adam> {
        let mut opt = Adam::new(store);
        for (i, (name, t)) in store.iter().enumerate() {
            for (slot, which) in [(&mut opt.m[i], "m"), (&mut opt.v[i], "v")] {
                let src = self.require(&format!("{prefix}.{which}/{name}"))?;
                if src.shape() != t.shape() {
                    return Err(Error::Checkpoint {
                        path: Default::default(),
                        detail: format!("optimizer state for {name} has shape {:?}", src.shape()),
                    });
                }
                *slot = src.clone();
            }
        }
        opt.step = self.require(&format!("{prefix}.step"))?.item() as u64;
        Ok(opt)
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * self.tensors.iter().map(|(_, t)| t.numel()).sum::<usize>());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::json(path.display().to_string(), e))?;
        let mut offset = body;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(bad(&format!("data for {} is truncated", entry.name)));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset = end;
            tensors.push((entry.name, Tensor::new(&entry.shape, data)?));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            config_hash: header.config_hash,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    /// Loads `path` and checks its kind and configuration digest.
    pub fn load_expecting(path: &Path, kind: &str, config_hash: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("expected a {kind} checkpoint, found {}", ck.kind),
            });
        }
        if ck.config_hash != config_hash {
            return Err(Error::ConfigMismatch {
                expected: config_hash.to_string(),
                found: format!("{} (in {})", ck.config_hash, path.display()),
            });
        }
        Ok(ck)
    }
}
