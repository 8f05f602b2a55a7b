//! Checkpoint files: `u64` little-endian header length, a JSON header, then
//! every parameter as little-endian `f32` in header order.
//!
//! The header lists each tensor's name, shape and element offset. Output
//! depends only on the inputs, so identical parameters give identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

use super::params::ParamSet;
use super::{ModelError, Result};

const FORMAT: &str = "pstmae-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    params: Vec<Entry>,
}

/// A model kind tag, its configuration, free-form metadata (training
/// progress, normalization statistics, …) and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            params,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().unwrap();
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header too large"))?;
        let json = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad(&format!("unsupported format {} v{}", header.format, header.version)));
        }
        let blob = &bytes[8 + hlen..];
        if blob.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut params = ParamSet::new();
        let mut expected = 0;
        for e in header.params {
            let n: usize = e.shape.iter().product();
            if e.offset != expected || e.offset + n > floats.len() {
                return Err(bad(&format!("parameter {} has a bad offset", e.name)));
            }
            params.push(e.name, Tensor::new(e.shape, floats[e.offset..e.offset + n].to_vec())?);
            expected += n;
        }
        if expected != floats.len() {
            return Err(bad("payload length does not match the header"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(ModelError::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(self)
    }
}
