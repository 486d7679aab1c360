use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{softmax, Linear};
use crate::params::ParamBuilder;

/// Normalisation applied to the pooled channel descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingGate {
    /// Weights sum to one across channels.
    Softmax,
    /// Independent per-channel gates in (0, 1), as in squeeze-and-excitation.
    Sigmoid,
}

impl std::str::FromStr for CouplingGate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "sigmoid" => Ok(Self::Sigmoid),
            _ => Err(Error::Config(format!("coupling gate must be softmax or sigmoid, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for CouplingGate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Sigmoid => "sigmoid",
        })
    }
}

/// Channel-attention fusion of the convolutional and attention branches.
///
/// The two maps are stacked along channels into `X`; average- and max-pooled
/// channel descriptors go through one shared two-layer MLP, the sum of both
/// outputs is normalised into per-channel weights, and the output is the
/// channel-wise product of the weights with `X`.
#[derive(Debug, Clone)]
pub struct FeatureCoupling {
    fc1: Linear,
    fc2: Linear,
    channels: usize,
    gate: CouplingGate,
}

impl FeatureCoupling {
    pub fn new(pb: &mut ParamBuilder, channels: usize, reduction: usize, gate: CouplingGate) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!("reduction {reduction} must divide {channels} channels")));
        }
        let hidden = channels / reduction;
        let mut mlp = pb.pp("mlp");
        Ok(Self {
            fc1: Linear::new(&mut mlp.pp("fc1"), channels, hidden, true)?,
            fc2: Linear::new(&mut mlp.pp("fc2"), hidden, channels, true)?,
            channels,
            gate,
        })
    }

    fn shared_mlp(&self, v: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(v)?.relu()?)
    }

    /// Returns the fused map `Y` and the channel weights `(b, C)`.
    pub fn forward(&self, conv: &FeatureMap, attn: &FeatureMap) -> Result<(FeatureMap, Tensor)> {
        let (b1, h1, w1, c1) = conv.dims();
        let (b2, h2, w2, c2) = attn.dims();
        if (b1, h1, w1) != (b2, h2, w2) || conv.stride != attn.stride {
            return Err(Error::Shape(format!(
                "coupling inputs disagree: conv {:?}/{} vs attention {:?}/{}",
                conv.dims(),
                conv.stride,
                attn.dims(),
                attn.stride
            )));
        }
        if c1 + c2 != self.channels {
            return Err(Error::Shape(format!(
                "coupling expects {} stacked channels, got {c1}+{c2}",
                self.channels
            )));
        }
        let x = Tensor::cat(&[&conv.data, &attn.data], 3)?;
        let flat = x.reshape((b1, h1 * w1, self.channels))?;
        let avg = flat.mean(1)?;
        let max = flat.max(1)?;
        let logits = (self.shared_mlp(&avg)? + self.shared_mlp(&max)?)?;
        let weights = match self.gate {
            CouplingGate::Softmax => softmax(&logits, 1)?,
            CouplingGate::Sigmoid => (logits.neg()?.exp()? + 1.0)?.recip()?,
        };
        let y = x.broadcast_mul(&weights.reshape((b1, 1, 1, self.channels))?)?;
        Ok((FeatureMap::new(y, conv.stride)?, weights))
    }
}
