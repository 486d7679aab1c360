use candle_core::Tensor;

use super::window::{WindowAttention, WindowSpec};
use super::{check_input, standardize, FeatureMap, PatchConfig};
use crate::error::{Error, Result};
use crate::nn::{strided, Conv2d, ConvSpec, LayerNorm, Linear, Mlp};
use crate::params::ParamBuilder;

const LN_EPS: f64 = 1e-5;

/// Pre-norm transformer block over windows: `x + FSA(LN(x))` followed by
/// `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl SwinBlock {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Ok(Self {
            norm1: LayerNorm::new(&mut pb.pp("norm1"), dim, LN_EPS)?,
            attn: WindowAttention::new(&mut pb.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), dim, LN_EPS)?,
            mlp: Mlp::new(&mut pb.pp("mlp"), dim, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, spec: WindowSpec) -> Result<Tensor> {
        let x = (self.attn.forward(&self.norm1.forward(x)?, spec)? + x)?;
        Ok((self.mlp.forward(&self.norm2.forward(&x)?)? + &x)?)
    }
}

/// A regular-window block followed by a shifted-window block.
#[derive(Debug, Clone)]
pub struct SwinBlockPair {
    regular: SwinBlock,
    shifted: SwinBlock,
    window: usize,
}

impl SwinBlockPair {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize, window: usize, mlp_ratio: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        Ok(Self {
            regular: SwinBlock::new(&mut pb.pp("0"), dim, heads, mlp_ratio)?,
            shifted: SwinBlock::new(&mut pb.pp("1"), dim, heads, mlp_ratio)?,
            window,
        })
    }

    /// `z^{l-1}` → `z^{l+1}` on a `(b, h, w, c)` token map.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = z.dims4()?;
        let z = self.regular.forward(z, WindowSpec::regular(self.window))?;
        // A single window covers the map; shifting would only split it.
        let spec = if h <= self.window && w <= self.window {
            WindowSpec::regular(self.window)
        } else {
            WindowSpec::shifted(self.window)
        };
        self.shifted.forward(&z, spec)
    }
}

/// 2×2 neighbourhood concatenation, LayerNorm, then a linear `4C → 2C`.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut pb.pp("norm"), 4 * dim, LN_EPS)?,
            reduction: Linear::new(&mut pb.pp("reduction"), 4 * dim, 2 * dim, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("patch merging needs even sides, got {h}x{w}")));
        }
        let pick = |r: usize, c: usize| -> Result<Tensor> {
            let rows = strided(x, 1, r, h / 2, 2)?;
            strided(&rows, 2, c, w / 2, 2)
        };
        let merged = Tensor::cat(&[pick(0, 0)?, pick(1, 0)?, pick(0, 1)?, pick(1, 1)?], 3)?;
        self.reduction.forward(&self.norm.forward(&merged)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    merge: Option<PatchMerging>,
    pairs: Vec<SwinBlockPair>,
}

/// Hierarchical windowed-attention branch: 4×4 patch embedding, stages at
/// strides 4/8/16 joined by patch merging, final LayerNorm and a 1×1
/// projection to the branch width.
#[derive(Debug, Clone)]
pub struct PatchBackbone {
    embed: Conv2d,
    embed_norm: LayerNorm,
    stages: Vec<Stage>,
    out_norm: LayerNorm,
    proj: Linear,
}

impl PatchBackbone {
    pub fn new(pb: &mut ParamBuilder, cfg: &PatchConfig, out_channels: usize) -> Result<Self> {
        let embed_spec = ConvSpec {
            kernel: 4,
            stride: 4,
            padding: 0,
            groups: 1,
            bias: true,
        };
        let mut epb = pb.pp("embed");
        let embed = Conv2d::new(&mut epb.pp("proj"), 3, cfg.embed_dim, embed_spec)?;
        let embed_norm = LayerNorm::new(&mut epb.pp("norm"), cfg.embed_dim, LN_EPS)?;
        let mut stages = Vec::new();
        let mut dim = cfg.embed_dim;
        for (i, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
            let mut spb = pb.pp(format!("stages.{i}"));
            let merge = if i > 0 {
                let m = PatchMerging::new(&mut spb.pp("merge"), dim)?;
                dim *= 2;
                Some(m)
            } else {
                None
            };
            let pairs = (0..depth / 2)
                .map(|j| SwinBlockPair::new(&mut spb.pp(format!("blocks.{j}")), dim, heads, cfg.window, cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { merge, pairs });
        }
        Ok(Self {
            embed,
            embed_norm,
            stages,
            out_norm: LayerNorm::new(&mut pb.pp("out_norm"), dim, LN_EPS)?,
            proj: Linear::new(&mut pb.pp("proj"), dim, out_channels, true)?,
        })
    }

    /// Token maps after each stage, before the output norm.
    pub fn stage_outputs(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        check_input(image)?;
        self.stages_standardized(&standardize(image)?)
    }

    fn stages_standardized(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut z = self.embed_norm.forward(&self.embed.forward(x)?)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                z = m.forward(&z)?;
            }
            for pair in &stage.pairs {
                z = pair.forward(&z)?;
            }
            outs.push(z.clone());
        }
        Ok(outs)
    }

    /// `(b, H, W, 3)` unit-scaled image → `(b, H/16, W/16, 128N)`.
    pub fn forward(&self, image: &Tensor) -> Result<FeatureMap> {
        check_input(image)?;
        self.forward_standardized(&standardize(image)?)
    }

    pub(crate) fn forward_standardized(&self, x: &Tensor) -> Result<FeatureMap> {
        let last = self.stages_standardized(x)?.pop().expect("at least one stage");
        FeatureMap::new(self.proj.forward(&self.out_norm.forward(&last)?)?, 16)
    }
}
