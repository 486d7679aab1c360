use candle_core::Tensor;

use super::{check_input, standardize, FeatureMap, PixelConfig};
use crate::error::Result;
use crate::nn::{max_pool2d, Conv2d, ConvSpec, GroupNorm, Linear};
use crate::params::ParamBuilder;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    downsample: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, stride: usize, groups: usize) -> Result<Self> {
        let conv1 = Conv2d::new(&mut pb.pp("conv1"), in_ch, out_ch, ConvSpec::same(3).stride(stride).no_bias())?;
        let norm1 = GroupNorm::new(&mut pb.pp("norm1"), out_ch, groups, NORM_EPS)?;
        let conv2 = Conv2d::new(&mut pb.pp("conv2"), out_ch, out_ch, ConvSpec::same(3).no_bias())?;
        let norm2 = GroupNorm::new(&mut pb.pp("norm2"), out_ch, groups, NORM_EPS)?;
        let downsample = if stride != 1 || in_ch != out_ch {
            let mut ds = pb.pp("downsample");
            Some((
                Conv2d::new(&mut ds.pp("conv"), in_ch, out_ch, ConvSpec::same(1).stride(stride).no_bias())?,
                GroupNorm::new(&mut ds.pp("norm"), out_ch, groups, NORM_EPS)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.norm2.forward(&self.conv2.forward(&y)?)?;
        let identity = match &self.downsample {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + identity)?.relu()?)
    }
}

/// ResNet18-style convolutional branch truncated at stride 16 and projected
/// to the branch width with a 1×1 map.
#[derive(Debug, Clone)]
pub struct PixelBackbone {
    stem: Conv2d,
    stem_norm: GroupNorm,
    stages: Vec<Vec<BasicBlock>>,
    proj: Linear,
}

impl PixelBackbone {
    pub fn new(pb: &mut ParamBuilder, cfg: &PixelConfig, out_channels: usize) -> Result<Self> {
        let g = cfg.norm_groups;
        let mut stem_pb = pb.pp("stem");
        let stem_spec = ConvSpec {
            kernel: 7,
            stride: 2,
            padding: 3,
            groups: 1,
            bias: false,
        };
        let stem = Conv2d::new(&mut stem_pb.pp("conv"), 3, cfg.stem_width, stem_spec)?;
        let stem_norm = GroupNorm::new(&mut stem_pb.pp("norm"), cfg.stem_width, g, NORM_EPS)?;
        let mut stages = Vec::new();
        let mut in_ch = cfg.stem_width;
        for (i, (&width, &blocks)) in cfg.stage_widths.iter().zip(&cfg.blocks_per_stage).enumerate() {
            let mut spb = pb.pp(format!("stages.{i}"));
            let mut stage = Vec::new();
            for j in 0..blocks {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                stage.push(BasicBlock::new(&mut spb.pp(j.to_string()), in_ch, width, stride, g)?);
                in_ch = width;
            }
            stages.push(stage);
        }
        let proj = Linear::new(&mut pb.pp("proj"), in_ch, out_channels, true)?;
        Ok(Self {
            stem,
            stem_norm,
            stages,
            proj,
        })
    }

    /// `(b, H, W, 3)` unit-scaled image → `(b, H/16, W/16, 128N)`.
    pub fn forward(&self, image: &Tensor) -> Result<FeatureMap> {
        check_input(image)?;
        self.forward_standardized(&standardize(image)?)
    }

    pub(crate) fn forward_standardized(&self, x: &Tensor) -> Result<FeatureMap> {
        let x = self.stem_norm.forward(&self.stem.forward(x)?)?.relu()?;
        let mut x = max_pool2d(&x, 3, 2, 1)?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
        }
        FeatureMap::new(self.proj.forward(&x)?, 16)
    }
}
