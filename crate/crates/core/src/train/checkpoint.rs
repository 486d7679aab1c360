//! Safetensors archive holding model parameters, optimizer moments and a
//! JSON metadata record.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{HeightFormer, ModelConfig};

const META_KEY: &str = "heightformer";

/// Validation summary recorded after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_rel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub dtype: String,
}

/// Everything needed to rebuild a model and, when present, continue training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        DType::F16 => "f16",
        DType::BF16 => "bf16",
        _ => "f32",
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(Error::Checkpoint(format!("unsupported parameter dtype `{s}`"))),
    }
}

impl Checkpoint {
    /// Snapshot of the current weights; later optimizer steps do not alter it.
    pub fn capture(model: &HeightFormer, optim: Option<&AdamW>, train: Option<&TrainConfig>, epoch: usize, history: &[EpochRecord]) -> Result<Self> {
        let params = model
            .params()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        let optimizer = optim
            .map(|o| o.state_tensors().into_iter().collect())
            .unwrap_or_default();
        Ok(Self {
            meta: CheckpointMeta {
                model: model.config().clone(),
                train: train.cloned(),
                step: optim.map(|o| o.step_count()).unwrap_or(0),
                epoch,
                history: history.to_vec(),
                dtype: dtype_name(model.dtype()).into(),
            },
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        let tensors: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(k, t)| (format!("param.{k}"), t))
            .chain(self.optimizer.iter().map(|(k, t)| (k.clone(), t)))
            .collect();
        safetensors::serialize_to_file(tensors, Some(info), path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::decode(path, e))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::decode(path, "not a height model checkpoint (metadata missing)"))?;
        let meta: CheckpointMeta = serde_json::from_str(meta_json).map_err(|e| Error::decode(path, e))?;
        let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut params = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (k, t) in all {
            if let Some(name) = k.strip_prefix("param.") {
                params.insert(name.to_string(), t);
            } else if k.starts_with("optim.") {
                optimizer.insert(k, t);
            } else {
                return Err(Error::decode(path, format!("unexpected tensor `{k}`")));
            }
        }
        Ok(Self { meta, params, optimizer })
    }

    /// Rebuild the model with the stored weights.
    pub fn model(&self) -> Result<HeightFormer> {
        let dtype = parse_dtype(&self.meta.dtype)?;
        let model = HeightFormer::new(&self.meta.model, 0, dtype)?;
        self.load_into(&model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &HeightFormer) -> Result<()> {
        let store = model.params();
        for name in store.names() {
            if !self.params.contains_key(name) {
                return Err(Error::Checkpoint(format!("parameter `{name}` missing from checkpoint")));
            }
        }
        for (name, t) in &self.params {
            if store.get(name).is_none() {
                return Err(Error::Checkpoint(format!("checkpoint has unknown parameter `{name}`")));
            }
            store.assign(name, t)?;
        }
        Ok(())
    }

    pub fn optimizer(&self, weight_decay: f64) -> Result<AdamW> {
        let mut o = AdamW::new(weight_decay);
        o.restore(self.meta.step, &self.optimizer)?;
        Ok(o)
    }
}

/// Checkpoint from a path, or a clear error naming it.
pub fn load_model(path: &Path) -> Result<(HeightFormer, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.model()?, ck))
}
