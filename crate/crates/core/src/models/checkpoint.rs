//! Versioned binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! | field          | type                 |
//! |----------------|----------------------|
//! | magic          | 8 bytes `CLNPEFT\0`  |
//! | version        | u32 (= 1)            |
//! | header length  | u32                  |
//! | header         | UTF-8 JSON           |
//! | tensor count   | u32                  |
//! | tensors        | repeated (below)     |
//!
//! Each tensor: u32 name length, UTF-8 name, u32 rank, rank × u64 dims,
//! u8 trainable flag, then `product(dims)` f64 values.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderModel, Model, RnnConfig, RnnModel};
use crate::error::{Error, Result};
use crate::nn::{ParamSpec, ParamStore};
use crate::peft::PeftState;
use crate::tensor::Tensor;
use crate::util::write_atomic;

pub const MAGIC: &[u8; 8] = b"CLNPEFT\0";
pub const VERSION: u32 = 1;

/// Structural description stored in the checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Encoder {
        config: EncoderConfig,
        peft: PeftState,
        head: bool,
    },
    Rnn {
        config: RnnConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    vocab: Vec<String>,
}

/// A model together with the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vec<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let spec = match &self.model {
            Model::Encoder(m) => ModelSpec::Encoder {
                config: m.config.clone(),
                peft: m.peft.clone(),
                head: m.has_head(),
            },
            Model::Rnn(m) => ModelSpec::Rnn {
                config: m.config.clone(),
            },
        };
        let header = serde_json::to_vec(&Header {
            model: spec,
            vocab: self.vocab.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let store = self.model.store();
        let mut out = Vec::with_capacity(16 + header.len() + store.total_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&len_u32(store.len())?.to_le_bytes());
        for (_, p) in store.iter() {
            out.extend_from_slice(&len_u32(p.name.len())?.to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&len_u32(p.tensor.rank())?.to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(u8::from(p.trainable()));
            for v in p.tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(n)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let trainable = r.take(1)?[0] != 0;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(shape, values)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, t.with_requires_grad(trainable)));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }

        let model = match header.model {
            ModelSpec::Encoder { config, peft, head } => {
                let specs = EncoderModel::layout(&config, &peft, head)?;
                Model::Encoder(EncoderModel::from_parts(
                    config,
                    assemble(&specs, tensors)?,
                    peft,
                )?)
            }
            ModelSpec::Rnn { config } => {
                let specs = super::rnn::rnn_specs(&config);
                Model::Rnn(RnnModel::from_parts(config, assemble(&specs, tensors)?)?)
            }
        };
        Ok(Self {
            model,
            vocab: header.vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Rebuilds a store in file order, taking parameter groups from the layout.
fn assemble(specs: &[ParamSpec], tensors: Vec<(String, Tensor)>) -> Result<ParamStore> {
    if specs.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model layout expects {}",
            tensors.len(),
            specs.len()
        )));
    }
    let groups: HashMap<&str, &ParamSpec> = specs.iter().map(|s| (s.name.as_str(), s)).collect();
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        let spec = groups
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                t.shape(),
                spec.shape
            )));
        }
        let trainable = t.requires_grad();
        let id = store.add(name, t, spec.group)?;
        store.get_mut(id).tensor.set_requires_grad(trainable);
    }
    Ok(store)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
