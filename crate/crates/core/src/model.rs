use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, DecoderOutput};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::height::HeightRange;
use crate::params::{seeded_rng, ParamBuilder, ParamStore};

/// Architecture plus the dataset height range the output is scaled into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub range: HeightRange,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            range: HeightRange { min: 0.0, max: 1.0 },
        }
    }
}

impl ModelConfig {
    pub fn bins(&self) -> usize {
        self.encoder.bins
    }

    /// Set N on both halves.
    pub fn set_bins(&mut self, n: usize) {
        self.encoder.bins = n;
        self.decoder.bins = n;
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.bins != self.decoder.bins {
            return Err(Error::Config(format!(
                "encoder and decoder disagree on bin count ({} vs {})",
                self.encoder.bins, self.decoder.bins
            )));
        }
        HeightRange::new(self.range.min, self.range.max)?;
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.fused_channels())
    }
}

/// Encoder + decoder with their parameters.
#[derive(Debug, Clone)]
pub struct HeightFormer {
    pub encoder: Encoder,
    pub decoder: Decoder,
    params: ParamStore,
    cfg: ModelConfig,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub decoder: DecoderOutput,
    pub channel_weights: Tensor,
}

impl ModelOutput {
    /// Predicted heights in meters, `(batch, rows, cols)`.
    pub fn meters(&self) -> &Tensor {
        &self.decoder.heights.meters
    }
}

impl HeightFormer {
    /// Build with parameters initialised from `seed`. Parameter names live
    /// under `encoder.` and `decoder.`.
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(dtype, Device::Cpu);
        let mut rng = seeded_rng(seed);
        let (encoder, decoder) = {
            let mut pb = ParamBuilder::new(&mut params, &mut rng);
            let encoder = Encoder::new(&mut pb.pp("encoder"), &cfg.encoder)?;
            let decoder = Decoder::new(&mut pb.pp("decoder"), &cfg.decoder, cfg.encoder.fused_channels())?;
            (encoder, decoder)
        };
        Ok(Self {
            encoder,
            decoder,
            params,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// `image`: `(batch, rows, cols, 3)` unit-scaled colors, both sides
    /// divisible by 32.
    pub fn forward(&self, image: &Tensor) -> Result<ModelOutput> {
        let image = image.to_dtype(self.dtype())?;
        let enc = self.encoder.forward(&image)?;
        let decoder = self.decoder.forward(&enc.fused, self.cfg.range)?;
        Ok(ModelOutput {
            decoder,
            channel_weights: enc.channel_weights,
        })
    }

    pub fn count_parameters(&self) -> ParameterCount {
        ParameterCount {
            total: self.params.count(),
            by_module: self.params.count_by_prefix(2),
        }
    }
}

/// Trainable-parameter totals, broken down by `encoder.*` / `decoder.*` submodule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterCount {
    pub total: usize,
    pub by_module: BTreeMap<String, usize>,
}

impl ParameterCount {
    pub fn module_total(&self, prefix: &str) -> usize {
        self.by_module
            .iter()
            .filter(|(k, _)| k.as_str() == prefix || k.starts_with(&format!("{prefix}.")))
            .map(|(_, v)| v)
            .sum()
    }
}

impl std::fmt::Display for ParameterCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<24} {:>14}", "module", "parameters")?;
        for (k, v) in &self.by_module {
            writeln!(f, "{k:<24} {v:>14}")?;
        }
        write!(f, "{:<24} {:>14}", "total", self.total)
    }
}
