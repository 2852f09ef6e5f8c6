//! Checkpoint files: named `VSDT` tensors behind a JSON header.
//!
//! ```text
//! b"VSDCKPT\0" | header_len: u64 LE | header: JSON (UTF-8) | payload
//! ```
//!
//! The payload is the concatenation of one `VSDT` record per tensor. The
//! header lists each tensor's name, byte offset into the payload and byte
//! length, together with the model kind and an echo of its configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vsd_core::nn::ParamStore;
use vsd_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VSDCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub kind: String,
    pub config: Value,
    #[serde(default)]
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: &impl Serialize, params: ParamStore) -> Result<Self> {
        Ok(Self {
            kind: kind.into(),
            config: serde_json::to_value(config).map_err(|e| Error::Checkpoint(e.to_string()))?,
            meta: Value::Null,
            params,
        })
    }

    pub fn with_meta(mut self, meta: Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("{} config: {e}", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let bytes = t.to_vsdt_bytes();
            tensors.push(TensorEntry {
                name: name.to_string(),
                offset: payload.len() as u64,
                length: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            version: VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", header.version)));
        }
        let payload = &bytes[header_end..];
        let mut params = ParamStore::new();
        for entry in &header.tensors {
            let range = usize::try_from(entry.offset)
                .ok()
                .zip(usize::try_from(entry.length).ok())
                .and_then(|(o, l)| Some(o..o.checked_add(l)?))
                .filter(|r| r.end <= payload.len())
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` lies outside the payload", entry.name)))?;
            let t = Tensor::from_vsdt_bytes(&payload[range])?;
            if params.contains(&entry.name) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", entry.name)));
            }
            params.insert(entry.name.clone(), t);
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Splits a store into the tensors whose names start with `prefix` and the rest.
pub fn partition(params: ParamStore, prefix: &str) -> (ParamStore, ParamStore) {
    let (mut a, mut b) = (ParamStore::new(), ParamStore::new());
    for (name, t) in params.iter() {
        if name.starts_with(prefix) {
            a.insert(name, t.clone());
        } else {
            b.insert(name, t.clone());
        }
    }
    (a, b)
}
