//! Weight checkpoints.
//!
//! A checkpoint is a single JSON document:
//!
//! ```text
//! {
//!   "format": "deepbass-checkpoint",
//!   "version": 1,
//!   "seed": 42,
//!   "spec": { "id": "...", "input_shape": [...], "layers": [...] },
//!   "params": [ { "name": "dense0.kernel", "shape": [2, 50], "data": [...] }, ... ]
//! }
//! ```
//!
//! Parameter values are written with shortest round-trip formatting so a
//! reload reproduces every weight bit for bit. Readers reject other formats
//! and newer major versions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "deepbass-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    seed: u64,
    spec: ModelSpec,
    params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: model.seed(),
            spec: model.spec().clone(),
            params: model
                .params()
                .iter()
                .map(|p| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<Model<f32>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::format("format", format!("expected {CHECKPOINT_FORMAT:?}, got {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::format("version", format!("unsupported checkpoint version {}", self.version)));
        }
        let reference = Model::<f32>::build(self.spec.clone(), self.seed)?;
        let params = self
            .params
            .into_iter()
            .zip(reference.params())
            .map(|(stored, r)| {
                Ok(Param {
                    name: stored.name,
                    value: Tensor::new(stored.shape, stored.data)?,
                    l2: r.l2,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_parts(self.spec, params, self.seed)
    }

    pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Self::from_model(model))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model<f32>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.into_model()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}
