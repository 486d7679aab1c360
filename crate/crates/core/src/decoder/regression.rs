//! Classification-regression head: softmaxed bin vector dotted with the
//! per-pixel softmaxed probability volume, then rescaled to meters.

use candle_core::{Device, DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::height::HeightRange;
use crate::nn::softmax_last;

/// How bin logits become per-bin values in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinMode {
    /// `Σ softmax(H)_i · softmax(P)_i`.
    Literal,
    /// `softmax(H)` read as bin widths; values are the cumulative bin centres.
    BinCenters,
}

impl std::str::FromStr for BinMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "bin-centers" => Ok(Self::BinCenters),
            _ => Err(Error::Config(format!("bin mode must be literal or bin-centers, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for BinMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::BinCenters => "bin-centers",
        })
    }
}

/// Spacing of the constant bins used by the fixed-bin ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedSpacing {
    Uniform,
    Log,
}

impl std::str::FromStr for FixedSpacing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "log" => Ok(Self::Log),
            _ => Err(Error::Config(format!("fixed spacing must be uniform or log, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for FixedSpacing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Log => "log",
        })
    }
}

/// Centres of `n` bins partitioning `[0, 1]`.
pub fn fixed_bin_values(n: usize, spacing: FixedSpacing) -> Vec<f64> {
    let edge = |i: usize| -> f64 {
        let t = i as f64 / n as f64;
        match spacing {
            FixedSpacing::Uniform => t,
            // log-spaced edges of 1 + 9t, mapped back onto [0, 1]
            FixedSpacing::Log => ((1.0 + 9.0 * t).ln()) / 10f64.ln(),
        }
    };
    (0..n).map(|i| 0.5 * (edge(i) + edge(i + 1))).collect()
}

/// Per-image bin vector `(batch, N)`. For adaptive bins these are logits; for
/// fixed bins they are the constant normalised bin values.
#[derive(Debug, Clone)]
pub struct BinSet {
    pub logits: Tensor,
    pub fixed: bool,
}

impl BinSet {
    pub fn len(&self) -> usize {
        self.logits.dims().last().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normalised bin values `Ĥ` in `[0, 1]` under `mode`.
    pub fn values(&self, mode: BinMode) -> Result<Tensor> {
        if self.fixed {
            return Ok(self.logits.clone());
        }
        let widths = softmax_last(&self.logits)?;
        match mode {
            BinMode::Literal => Ok(widths),
            BinMode::BinCenters => {
                let n = self.len();
                let tri = centre_matrix(n, widths.dtype(), widths.device())?;
                let (lead, _) = split_last(&widths)?;
                let flat = widths.reshape((lead, n))?.matmul(&tri)?;
                Ok(flat.reshape(widths.dims())?)
            }
        }
    }
}

fn split_last(t: &Tensor) -> Result<(usize, usize)> {
    let n = *t.dims().last().ok_or_else(|| Error::Shape("scalar bin set".into()))?;
    Ok((t.elem_count() / n.max(1), n))
}

/// `T[j][i] = 1` for `j < i`, `1/2` for `j = i`: `w · T` are cumulative centres.
fn centre_matrix(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0.0f64; n * n];
    for j in 0..n {
        for i in j..n {
            m[j * n + i] = if i == j { 0.5 } else { 1.0 };
        }
    }
    Ok(Tensor::from_vec(m, (n, n), device)?.to_dtype(dtype)?)
}

/// Per-pixel class logits `(batch, rows, cols, N)` plus the spatial shape of
/// every pyramid level `(rows, cols, channels)` that produced it.
#[derive(Debug, Clone)]
pub struct ProbabilityVolume {
    pub logits: Tensor,
    pub levels: Vec<(usize, usize, usize)>,
}

/// Normalised and metric predictions for a batch.
#[derive(Debug, Clone)]
pub struct HeightOutput {
    /// `Result̂`, `(batch, rows, cols)` in `[0, 1]`.
    pub normalized: Tensor,
    /// `Result` in meters.
    pub meters: Tensor,
    pub range: HeightRange,
}

/// Dot product of per-bin values `(b, N)` with softmaxed per-pixel logits
/// `(b, h, w, N)`, giving `(b, h, w)`.
pub fn regress_values(bin_values: &Tensor, prob_logits: &Tensor) -> Result<Tensor> {
    let (b, h, w, n) = prob_logits.dims4()?;
    let (bb, bn) = bin_values.dims2()?;
    if bn != n || bb != b {
        return Err(Error::Shape(format!(
            "bin vector {:?} does not match probability volume {:?}",
            bin_values.dims(),
            prob_logits.dims()
        )));
    }
    let p_hat = softmax_last(prob_logits)?;
    let r = p_hat.reshape((b, h * w, n))?.matmul(&bin_values.reshape((b, n, 1))?)?;
    Ok(r.reshape((b, h, w))?)
}

/// Softmax over bins, softmax over per-pixel classes, dot product, and linear
/// rescale into `range`.
pub fn height_regression(bins: &BinSet, volume: &ProbabilityVolume, range: HeightRange, mode: BinMode) -> Result<HeightOutput> {
    let values = bins.values(mode)?;
    // a one-hot pixel can land an ulp outside the range after the dot product
    let normalized = regress_values(&values, &volume.logits)?.clamp(0.0, 1.0)?;
    let meters = normalized.affine(range.span(), range.min)?.clamp(range.min, range.max)?;
    Ok(HeightOutput {
        normalized,
        meters,
        range,
    })
}
