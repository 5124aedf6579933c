//! Binary checkpoint container.
//!
//! ```text
//! magic "CVTXCKPT" | u32 version | u32 header bytes | header text
//! u32 count | per parameter: u32 name bytes, name, u32 rank, u64 dims…, f32 data…
//! ```
//!
//! All integers and floats are little-endian. The header is `key = value`
//! text in the config format and is preserved verbatim.

use std::collections::BTreeMap;
use std::path::Path;

use super::{preset, Model, ModelConfig};
use crate::config::{apply_entries, parse_entries, render_entries, section, Entries};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVTXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered header entries.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Header(Entries);

impl Header {
    pub fn new(entries: Entries) -> Self {
        Header(entries)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Replaces an existing key in place or appends it.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.0.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.0.push((key.to_string(), value)),
        }
    }

    pub fn entries(&self) -> &Entries {
        &self.0
    }

    pub fn to_text(&self) -> String {
        render_entries(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            Error::format("checkpoint", format!("truncated while reading {what}"))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format("checkpoint", format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, header: Header) -> Self {
        Checkpoint {
            header,
            params: model.params().clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = self.header.to_text();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(
                "checkpoint",
                "bad magic; not a checkpoint file",
            ));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let header = Header(parse_entries(&r.string("header")?)?);
        let count = r.u32("parameter count")?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("shape")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| {
                    Error::format("checkpoint", format!("shape of `{name}` overflows"))
                })?;
            let bytes = r.take(n.saturating_mul(4), &name)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if params
                .insert(name.clone(), Tensor::new(shape, data)?)
                .is_some()
            {
                return Err(Error::format(
                    "checkpoint",
                    format!("duplicate parameter `{name}`"),
                ));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::format(
                "checkpoint",
                "trailing bytes after the last parameter",
            ));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// The model configuration echoed under `model.*`.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let entries = section(self.header.entries(), "model");
        if entries.is_empty() {
            return Err(Error::format(
                "checkpoint",
                "header has no model configuration",
            ));
        }
        let cfg: ModelConfig = apply_entries(&preset("toy")?, &entries)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rebuilds the model from the echoed config.
    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(self.model_config()?, self.params.clone())
    }
}
