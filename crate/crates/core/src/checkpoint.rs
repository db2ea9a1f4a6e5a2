//! Binary checkpoint files.
//!
//! Layout: the 8 magic bytes `NSPBERT1`, a little-endian `u32` header
//! length, a UTF-8 JSON header, then every tensor as raw little-endian f32
//! in header order.

use std::fs;
use std::path::{Path, PathBuf};

use nsp_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, EncoderModel};

pub const MAGIC: &[u8; 8] = b"NSPBERT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
    step: u64,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(model: EncoderModel, step: u64, seed: u64) -> Self {
        Self { model, step, seed }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .model
            .param_names()
            .into_iter()
            .zip(self.model.params())
            .map(|(name, t)| {
                let e = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len();
                e
            })
            .collect();
        let header = Header {
            config: self.model.config().clone(),
            tensors,
            step: self.step,
            seed: self.seed,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
        let len = u32::try_from(json.len())
            .map_err(|_| Error::Format("header larger than 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.model.params() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(Error::Truncated {
                    needed: n,
                    actual: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(12)?;
        let magic = &bytes[..8];
        if magic != MAGIC {
            if magic[..7] == MAGIC[..7] {
                return Err(Error::Version {
                    expected: String::from_utf8_lossy(MAGIC).into_owned(),
                    found: String::from_utf8_lossy(magic).into_owned(),
                });
            }
            return Err(Error::Format(format!("bad magic bytes {magic:?}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        need(12 + hlen)?;
        let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
        let data = &bytes[12 + hlen..];

        let specs = header.config.param_specs();
        if header.tensors.len() != specs.len() {
            return Err(Error::Format(format!(
                "config implies {} tensors, header lists {}",
                specs.len(),
                header.tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for ((name, shape), entry) in specs.iter().zip(&header.tensors) {
            if &entry.name != name {
                return Err(Error::Format(format!(
                    "expected tensor {name}, found {}",
                    entry.name
                )));
            }
            if &entry.shape != shape {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: entry.shape.clone(),
                });
            }
            let n: usize = shape.iter().product();
            let end = entry.offset + 4 * n;
            if data.len() < end {
                return Err(Error::Truncated {
                    needed: 12 + hlen + end,
                    actual: bytes.len(),
                });
            }
            let values = data[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(Tensor::new(shape, values)?);
        }
        Ok(Self {
            model: EncoderModel::from_params(header.config, params)?,
            step: header.step,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks that every tensor has the shape the
    /// given configuration requires.
    pub fn load_expecting(path: impl AsRef<Path>, config: &EncoderConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        for ((name, want), t) in config.param_specs().iter().zip(ck.model.params()) {
            if t.shape() != want.as_slice() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: want.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if ck.model.config() != config {
            return Err(Error::Format(format!(
                "checkpoint config {:?} differs from expected {:?}",
                ck.model.config(),
                config
            )));
        }
        Ok(ck)
    }
}

/// Path of the vocabulary file stored next to a checkpoint.
pub fn vocab_path(checkpoint: impl AsRef<Path>) -> PathBuf {
    let mut p = checkpoint.as_ref().as_os_str().to_owned();
    p.push(".vocab");
    PathBuf::from(p)
}
