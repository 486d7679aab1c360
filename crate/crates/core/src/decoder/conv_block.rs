use candle_core::Tensor;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, Conv2d, ConvSpec, LayerNorm};
use crate::params::ParamBuilder;

/// One pyramid level: bilinear upsample → 3×3 conv → ReLU → 1×1 conv →
/// LayerNorm over channels.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    conv3: Conv2d,
    conv1: Conv2d,
    norm: LayerNorm,
    in_channels: usize,
    upsample: usize,
}

/// Intermediate and final outputs of a [`ConvBlock`].
#[derive(Debug, Clone)]
pub struct ConvBlockParts {
    pub activated: Tensor,
    pub output: FeatureMap,
}

impl ConvBlock {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, upsample: usize, groups: usize, norm_eps: f64) -> Result<Self> {
        if upsample == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        Ok(Self {
            conv3: Conv2d::new(&mut pb.pp("conv3"), in_ch, out_ch, ConvSpec::same(3).groups(groups))?,
            conv1: Conv2d::new(&mut pb.pp("conv1"), out_ch, out_ch, ConvSpec::same(1))?,
            norm: LayerNorm::new(&mut pb.pp("norm"), out_ch, norm_eps)?,
            in_channels: in_ch,
            upsample,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.out_channels()
    }

    pub fn forward_parts(&self, prev: &FeatureMap) -> Result<ConvBlockParts> {
        let (_, h, w, c) = prev.dims();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv block expects {} channels, got {c}",
                self.in_channels
            )));
        }
        if prev.stride % self.upsample != 0 {
            return Err(Error::Shape(format!(
                "cannot upsample a stride-{} map by {}",
                prev.stride, self.upsample
            )));
        }
        let up = resize_bilinear(&prev.data, h * self.upsample, w * self.upsample)?;
        let activated = self.conv3.forward(&up)?.relu()?;
        let out = self.norm.forward(&self.conv1.forward(&activated)?)?;
        Ok(ConvBlockParts {
            activated,
            output: FeatureMap::new(out, prev.stride / self.upsample)?,
        })
    }

    pub fn forward(&self, prev: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_parts(prev)?.output)
    }
}
