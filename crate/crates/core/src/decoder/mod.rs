//! Height decoder with per-image bins and per-pixel bin probabilities.
//!
//! Three pyramid levels, each a [`ConvBlock`] followed by a
//! [`TransformerBlock`] that refines the `N` height queries against that
//! level's output. The final queries give the per-image bin vector; the last
//! conv level is the per-pixel probability volume.

mod attention;
mod conv_block;
mod regression;

pub use attention::{init_height_queries, MultiHeadAttention, TransformerBlock};
pub use conv_block::{ConvBlock, ConvBlockParts};
pub use regression::{
    fixed_bin_values, height_regression, regress_values, BinMode, BinSet, FixedSpacing, HeightOutput,
    ProbabilityVolume,
};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::height::HeightRange;
use crate::nn::Linear;
use crate::params::ParamBuilder;

/// Channels per bin at each level: `(H/16, W/16, 16N)`, `(H/4, W/4, 4N)`, `(H, W, N)`.
pub const LEVEL_CHANNELS_PER_BIN: [usize; 3] = [16, 4, 1];
pub const LEVEL_UPSAMPLE: [usize; 3] = [1, 4, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinSource {
    /// Bins predicted per image from the query branch.
    Adaptive,
    /// Constant bins; the query branch is bypassed.
    Fixed,
}

impl std::str::FromStr for BinSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "fixed" => Ok(Self::Fixed),
            _ => Err(Error::Config(format!("bins must be adaptive or fixed, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for BinSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adaptive => "adaptive",
            Self::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub bins: usize,
    /// Query embedding width `d`.
    pub query_dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Maximum key/value tokens per cross-attention (24×24 by default).
    pub token_cap: usize,
    /// Groups of the 3×3 convolution at each level.
    pub conv_groups: [usize; 3],
    pub bin_mode: BinMode,
    pub bin_source: BinSource,
    pub fixed_spacing: FixedSpacing,
    /// Epsilon of the per-level channel LayerNorm.
    pub norm_eps: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            query_dim: 256,
            heads: 8,
            ffn_ratio: 4,
            token_cap: 576,
            conv_groups: [16, 1, 1],
            bin_mode: BinMode::Literal,
            bin_source: BinSource::Adaptive,
            fixed_spacing: FixedSpacing::Uniform,
            norm_eps: 1e-6,
        }
    }
}

impl DecoderConfig {
    pub fn level_channels(&self) -> [usize; 3] {
        LEVEL_CHANNELS_PER_BIN.map(|c| c * self.bins)
    }

    pub fn validate(&self, in_channels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bins == 0 || self.query_dim == 0 || self.token_cap == 0 {
            return bad("decoder: bins, query_dim and token_cap must be positive".into());
        }
        if self.heads == 0 || self.query_dim % self.heads != 0 {
            return bad(format!("decoder: {} heads do not divide query_dim {}", self.heads, self.query_dim));
        }
        let mut prev = in_channels;
        for (i, (&c, &g)) in self.level_channels().iter().zip(&self.conv_groups).enumerate() {
            if g == 0 || prev % g != 0 || c % g != 0 {
                return bad(format!("decoder: level {i} conv groups {g} must divide {prev} → {c} channels"));
            }
            prev = c;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Level {
    conv: ConvBlock,
    transformer: TransformerBlock,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    queries: Tensor,
    levels: Vec<Level>,
    bin_head: Linear,
    fixed_values: Tensor,
    cfg: DecoderConfig,
    in_channels: usize,
}

/// Everything the decoder produces for one batch.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub bins: BinSet,
    pub volume: ProbabilityVolume,
    pub heights: HeightOutput,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &DecoderConfig, in_channels: usize) -> Result<Self> {
        cfg.validate(in_channels)?;
        let n = cfg.bins;
        let d = cfg.query_dim;
        let queries = pb.trunc_normal("queries", (n, d), 1.0)?;
        let mut levels = Vec::with_capacity(3);
        let mut prev = in_channels;
        for (i, &c) in cfg.level_channels().iter().enumerate() {
            let mut lpb = pb.pp(format!("levels.{i}"));
            let conv = ConvBlock::new(&mut lpb.pp("conv"), prev, c, LEVEL_UPSAMPLE[i], cfg.conv_groups[i], cfg.norm_eps)?;
            let transformer = TransformerBlock::new(&mut lpb.pp("transformer"), c, d, cfg.heads, cfg.ffn_ratio, cfg.token_cap)?;
            levels.push(Level { conv, transformer });
            prev = c;
        }
        let bin_head = Linear::new(&mut pb.pp("bin_head"), d, 1, true)?;
        let fixed = fixed_bin_values(n, cfg.fixed_spacing);
        let fixed_values = Tensor::from_vec(fixed, (1, n), &pb.device())?.to_dtype(pb.dtype())?;
        Ok(Self {
            queries,
            levels,
            bin_head,
            fixed_values,
            cfg: cfg.clone(),
            in_channels,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    pub fn conv_block(&self, level: usize) -> &ConvBlock {
        &self.levels[level].conv
    }

    pub fn transformer_block(&self, level: usize) -> &TransformerBlock {
        &self.levels[level].transformer
    }

    pub fn forward(&self, y: &FeatureMap, range: HeightRange) -> Result<DecoderOutput> {
        let (b, _, _, c) = y.dims();
        if c != self.in_channels || y.stride != 16 {
            return Err(Error::Shape(format!(
                "decoder expects a stride-16 map with {} channels, got stride {} with {c}",
                self.in_channels, y.stride
            )));
        }
        let adaptive = self.cfg.bin_source == BinSource::Adaptive;
        let (n, d) = self.queries.dims2()?;
        let mut h = self.queries.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        let mut p = y.clone();
        let mut shapes = Vec::with_capacity(3);
        for level in &self.levels {
            p = level.conv.forward(&p)?;
            let (_, ph, pw, pc) = p.dims();
            shapes.push((ph, pw, pc));
            if adaptive {
                h = level.transformer.forward(&h, &p.data)?;
            }
        }
        let bins = if adaptive {
            BinSet {
                logits: self.bin_head.forward(&h)?.squeeze(2)?,
                fixed: false,
            }
        } else {
            BinSet {
                logits: self.fixed_values.broadcast_as((b, n))?.contiguous()?,
                fixed: true,
            }
        };
        let volume = ProbabilityVolume {
            logits: p.data,
            levels: shapes,
        };
        let heights = height_regression(&bins, &volume, range, self.cfg.bin_mode)?;
        Ok(DecoderOutput {
            bins,
            volume,
            heights,
        })
    }
}
