//! Single-file JSON checkpoints of named f64 tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rationalization::{ModelConfig, ModelParams};
use crate::tensor::{ParamSet, Tensor};

pub const FORMAT: &str = "rationale-forge-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub epoch: usize,
    pub model: ModelConfig,
    /// Keys are `generator/<name>` and `predictor/<name>`.
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, config_hash: &str, epoch: usize) -> Self {
        let mut tensors = BTreeMap::new();
        for (side, set) in [
            ("generator", &params.generator),
            ("predictor", &params.predictor),
        ] {
            for (name, t) in set.iter() {
                tensors.insert(
                    format!("{side}/{name}"),
                    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape"),
                );
            }
        }
        Checkpoint {
            format: FORMAT.to_string(),
            config_hash: config_hash.to_string(),
            epoch,
            model: params.config,
            tensors,
        }
    }

    /// Rebuild parameters, checking every tensor against `expected`'s layout.
    pub fn into_params(self, expected: &ModelParams) -> Result<ModelParams> {
        if self.format != FORMAT {
            return Err(Error::Config(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        if self.model != expected.config {
            return Err(Error::Config(format!(
                "checkpoint model {:?} does not match configured model {:?}",
                self.model, expected.config
            )));
        }
        let mut tensors = self.tensors;
        let mut rebuild = |side: &str, like: &ParamSet| -> Result<ParamSet> {
            let mut out = ParamSet::new();
            for (name, t) in like.iter() {
                let key = format!("{side}/{name}");
                let loaded = tensors
                    .remove(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {key}")))?;
                if loaded.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "checkpoint",
                        lhs: loaded.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                let loaded = Tensor::new(loaded.shape().to_vec(), loaded.into_data())?;
                out.insert(name, loaded);
            }
            Ok(out)
        };
        let generator = rebuild("generator", &expected.generator)?;
        let predictor = rebuild("predictor", &expected.predictor)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!(
                "checkpoint has unexpected tensor {extra}"
            )));
        }
        Ok(ModelParams {
            config: expected.config,
            generator,
            predictor,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
