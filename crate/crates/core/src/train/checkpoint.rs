//! JSON checkpoint container. Float arrays are stored as base64 of their
//! little-endian bytes so a save → load → save cycle is byte-identical.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use crate::config::{hash_json, RunConfig};
use crate::error::{Error, Result};
use crate::reasoning::{ModelDims, SceneGraphModel};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "sgf-checkpoint/1";

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Data(format!("bad base64 array: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data("array byte length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl ArrayRecord {
    fn new(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            data: encode_f64s(t.data()),
        }
    }

    fn tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), decode_f64s(&self.data)?)
            .map_err(|e| Error::Data(format!("array '{}': {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerRecord {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<ArrayRecord>,
    pub v: Vec<ArrayRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub vocab_hash: String,
    pub dims: ModelDims,
    /// Completed epochs. Shuffling for epoch `t` is derived from
    /// `config.train.seed` and `t`, so this is the whole RNG state.
    pub epoch: usize,
    pub params: Vec<ArrayRecord>,
    pub optimizer: OptimizerRecord,
    /// SHA-256 of this record serialized with an empty hash field.
    pub content_hash: String,
}

fn records(store: &ParamStore, values: impl Iterator<Item = Tensor>) -> Vec<ArrayRecord> {
    store
        .iter()
        .zip(values)
        .map(|((_, name, _), t)| ArrayRecord::new(name, &t))
        .collect()
}

impl Checkpoint {
    pub fn capture(
        model: &SceneGraphModel,
        optimizer: &AdamW,
        epoch: usize,
        config: &RunConfig,
        vocab_hash: &str,
    ) -> Self {
        let store = &model.params;
        let mut ck = Self {
            format: CHECKPOINT_FORMAT.to_owned(),
            tool_version: crate::TOOL_VERSION.to_owned(),
            config_hash: config.hash(),
            config: config.clone(),
            vocab_hash: vocab_hash.to_owned(),
            dims: model.dims,
            epoch,
            params: store.iter().map(|(_, n, t)| ArrayRecord::new(n, t)).collect(),
            optimizer: OptimizerRecord {
                config: optimizer.config,
                step: optimizer.step,
                m: records(store, optimizer.m.iter().cloned()),
                v: records(store, optimizer.v.iter().cloned()),
            },
            content_hash: String::new(),
        };
        ck.content_hash = ck.compute_hash();
        ck
    }

    fn compute_hash(&self) -> String {
        let mut copy = self.clone();
        copy.content_hash.clear();
        hash_json(&copy)
    }

    /// Rebuilds the model and optimizer; every parameter must be present
    /// with its expected shape.
    pub fn restore(&self) -> Result<(SceneGraphModel, AdamW)> {
        let mut model = SceneGraphModel::new(self.config.model.clone(), self.dims)?;
        let n = model.params.len();
        for list in [&self.params, &self.optimizer.m, &self.optimizer.v] {
            if list.len() != n {
                return Err(Error::Data(format!("checkpoint has {} arrays, model has {n}", list.len())));
            }
        }
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let ids: Vec<_> = model.params.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let name = model.params.name(id).to_owned();
            let shape = model.params.get(id).shape().to_vec();
            for rec in [&self.params[idx], &self.optimizer.m[idx], &self.optimizer.v[idx]] {
                if rec.name != name || rec.shape != shape {
                    return Err(Error::Data(format!(
                        "checkpoint array '{}' {:?} does not match parameter '{name}' {shape:?}",
                        rec.name, rec.shape
                    )));
                }
            }
            *model.params.get_mut(id) = self.params[idx].tensor()?;
            m.push(self.optimizer.m[idx].tensor()?);
            v.push(self.optimizer.v[idx].tensor()?);
        }
        let opt = AdamW {
            config: self.optimizer.config,
            step: self.optimizer.step,
            m,
            v,
        };
        Ok((model, opt))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Self = serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("unsupported checkpoint format '{}'", ck.format)));
        }
        if ck.compute_hash() != ck.content_hash {
            return Err(Error::Data("checkpoint content hash mismatch".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
