//! Two-branch encoder: a convolutional pixel branch and a
//! windowed-attention patch branch, both projected to `128·N` channels at
//! stride 16, fused by channel attention into a `256·N` map.

mod coupling;
mod pixel;
mod swin;
mod window;

pub use coupling::{CouplingGate, FeatureCoupling};
pub use pixel::PixelBackbone;
pub use swin::{PatchBackbone, PatchMerging, SwinBlock, SwinBlockPair};
pub use window::{attention_cost, window_shift, window_unshift, WindowAttention, WindowSpec};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamBuilder;

pub const VALID_STRIDES: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// A channels-last feature tensor `(batch, rows, cols, channels)` together
/// with its stride in input pixels.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 || dims[1..].iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("feature map must be (b, h, w, c) with h, w, c ≥ 1, got {dims:?}")));
        }
        if !VALID_STRIDES.contains(&stride) {
            return Err(Error::Shape(format!("unsupported feature stride {stride}")));
        }
        Ok(Self { data, stride })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[3]
    }

    /// Input size `(rows, cols)` this map corresponds to.
    pub fn input_size(&self) -> (usize, usize) {
        let (_, h, w, _) = self.dims();
        (h * self.stride, w * self.stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelConfig {
    pub stem_width: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub norm_groups: usize,
}

impl Default for PixelConfig {
    /// ResNet18 through its stride-16 stage.
    fn default() -> Self {
        Self {
            stem_width: 64,
            stage_widths: vec![64, 128, 256],
            blocks_per_stage: vec![2, 2, 2],
            norm_groups: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub embed_dim: usize,
    /// Blocks per stage; each must be even (blocks come in regular/shifted pairs).
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: f64,
}

impl Default for PatchConfig {
    /// Swin-Tiny stages at strides 4, 8 and 16.
    fn default() -> Self {
        Self {
            embed_dim: 96,
            depths: vec![2, 2, 6],
            heads: vec![3, 6, 12],
            window: 7,
            mlp_ratio: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of height bins N.
    pub bins: usize,
    /// Per-branch output width is `channels_per_bin · N` (128 by default).
    pub channels_per_bin: usize,
    pub pixel: PixelConfig,
    pub patch: PatchConfig,
    /// Hidden width of the coupling MLP is `fused / coupling_reduction`.
    pub coupling_reduction: usize,
    pub coupling_gate: CouplingGate,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            channels_per_bin: 128,
            pixel: PixelConfig::default(),
            patch: PatchConfig::default(),
            coupling_reduction: 64,
            coupling_gate: CouplingGate::Softmax,
        }
    }
}

impl EncoderConfig {
    pub fn branch_channels(&self) -> usize {
        self.channels_per_bin * self.bins
    }

    pub fn fused_channels(&self) -> usize {
        2 * self.branch_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bins == 0 || self.channels_per_bin == 0 {
            return bad("encoder: bins and channels_per_bin must be positive".into());
        }
        let p = &self.pixel;
        if p.stage_widths.len() != 3 || p.blocks_per_stage.len() != 3 {
            return bad("encoder.pixel: exactly three residual stages (strides 4, 8, 16) are required".into());
        }
        if p.stem_width == 0 || p.stage_widths.iter().chain(&p.blocks_per_stage).any(|&v| v == 0) {
            return bad("encoder.pixel: widths and block counts must be positive".into());
        }
        for &w in std::iter::once(&p.stem_width).chain(&p.stage_widths) {
            if p.norm_groups == 0 || w % p.norm_groups != 0 {
                return bad(format!("encoder.pixel: norm_groups {} must divide width {w}", p.norm_groups));
            }
        }
        let a = &self.patch;
        if a.depths.len() != 3 || a.heads.len() != 3 {
            return bad("encoder.patch: exactly three attention stages (strides 4, 8, 16) are required".into());
        }
        if a.window == 0 || a.embed_dim == 0 || a.mlp_ratio <= 0.0 {
            return bad("encoder.patch: window, embed_dim and mlp_ratio must be positive".into());
        }
        for (i, (&d, &h)) in a.depths.iter().zip(&a.heads).enumerate() {
            let dim = a.embed_dim << i;
            if d == 0 || d % 2 != 0 {
                return bad(format!("encoder.patch: stage {i} depth {d} must be a positive even number"));
            }
            if h == 0 || dim % h != 0 {
                return bad(format!("encoder.patch: {h} heads do not divide stage {i} width {dim}"));
            }
        }
        let fused = self.fused_channels();
        if self.coupling_reduction == 0 || fused % self.coupling_reduction != 0 {
            return bad(format!(
                "encoder: coupling_reduction {} must divide fused width {fused}",
                self.coupling_reduction
            ));
        }
        Ok(())
    }
}

/// The full encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub pixel: PixelBackbone,
    pub patch: PatchBackbone,
    pub coupling: FeatureCoupling,
}

/// Everything the encoder computed for one batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub fused: FeatureMap,
    pub channel_weights: Tensor,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.branch_channels();
        Ok(Self {
            pixel: PixelBackbone::new(&mut pb.pp("pixel"), &cfg.pixel, out)?,
            patch: PatchBackbone::new(&mut pb.pp("patch"), &cfg.patch, out)?,
            coupling: FeatureCoupling::new(
                &mut pb.pp("coupling"),
                cfg.fused_channels(),
                cfg.coupling_reduction,
                cfg.coupling_gate,
            )?,
        })
    }

    /// `image` is `(batch, rows, cols, 3)` with unit-scaled colors.
    pub fn forward(&self, image: &Tensor) -> Result<EncoderOutput> {
        check_input(image)?;
        let x = standardize(image)?;
        let conv = self.pixel.forward_standardized(&x)?;
        let attn = self.patch.forward_standardized(&x)?;
        let (fused, channel_weights) = self.coupling.forward(&conv, &attn)?;
        Ok(EncoderOutput {
            fused,
            channel_weights,
        })
    }
}

pub(crate) fn check_input(image: &Tensor) -> Result<()> {
    let dims = image.dims();
    if dims.len() != 4 || dims[3] != 3 {
        return Err(Error::Shape(format!("expected (b, h, w, 3) image, got {dims:?}")));
    }
    if dims[1] % 32 != 0 || dims[2] % 32 != 0 || dims[1] == 0 || dims[2] == 0 {
        return Err(Error::Shape(format!(
            "input {}x{} must have both sides divisible by 32",
            dims[1], dims[2]
        )));
    }
    Ok(())
}

/// Unit-scaled colors to roughly zero-mean, unit-variance inputs.
pub(crate) fn standardize(image: &Tensor) -> Result<Tensor> {
    Ok(image.affine(4.0, -2.0)?)
}
