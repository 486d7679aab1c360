use candle_core::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{adaptive_avg_pool, merge_heads, scaled_dot_attention, split_heads, LayerNorm, Linear, Mlp};
use crate::params::{trunc_normal_vec, ParamBuilder};

const LN_EPS: f64 = 1e-5;

/// Initial height queries `N×d`, truncated normal (σ = 1, cut at ±2σ).
pub fn init_height_queries(n: usize, d: usize, rng: &mut impl Rng) -> Vec<f64> {
    trunc_normal_vec(rng, n * d, 1.0)
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide query width {dim}")));
        }
        Ok(Self {
            q: Linear::new(&mut pb.pp("q"), dim, dim, true)?,
            k: Linear::new(&mut pb.pp("k"), dim, dim, true)?,
            v: Linear::new(&mut pb.pp("v"), dim, dim, true)?,
            o: Linear::new(&mut pb.pp("o"), dim, dim, true)?,
            heads,
        })
    }

    /// `query (b, tq, d)` attends over `context (b, tk, d)`.
    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = split_heads(&self.q.forward(query)?, self.heads)?;
        let k = split_heads(&self.k.forward(context)?, self.heads)?;
        let v = split_heads(&self.v.forward(context)?, self.heads)?;
        self.o.forward(&merge_heads(&scaled_dot_attention(&q, &k, &v, None)?)?)
    }

    /// Output projection applied to value projection: what every query
    /// receives when all context tokens are identical.
    pub fn value_path(&self, context: &Tensor) -> Result<Tensor> {
        self.o.forward(&self.v.forward(context)?)
    }
}

/// Query refinement block: cross-attention to the same-level probability
/// features, self-attention among queries, then a feed-forward layer, each
/// wrapped as `LN(f(x) + x)`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    embed: Linear,
    cross: MultiHeadAttention,
    norm1: LayerNorm,
    selfattn: MultiHeadAttention,
    norm2: LayerNorm,
    ffl: Mlp,
    norm3: LayerNorm,
    token_cap: usize,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, feature_channels: usize, dim: usize, heads: usize, ffn_ratio: usize, token_cap: usize) -> Result<Self> {
        if token_cap == 0 {
            return Err(Error::Config("token cap must be positive".into()));
        }
        Ok(Self {
            embed: Linear::new(&mut pb.pp("embed"), feature_channels, dim, true)?,
            cross: MultiHeadAttention::new(&mut pb.pp("cross"), dim, heads)?,
            norm1: LayerNorm::new(&mut pb.pp("norm1"), dim, LN_EPS)?,
            selfattn: MultiHeadAttention::new(&mut pb.pp("self"), dim, heads)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), dim, LN_EPS)?,
            ffl: Mlp::new(&mut pb.pp("ffl"), dim, dim * ffn_ratio.max(1))?,
            norm3: LayerNorm::new(&mut pb.pp("norm3"), dim, LN_EPS)?,
            token_cap,
        })
    }

    pub fn cross_attention(&self) -> &MultiHeadAttention {
        &self.cross
    }

    /// Token grid used for a `h×w` map: unchanged when `h·w` fits under the
    /// cap, otherwise both sides shrink by `sqrt(cap / hw)`.
    pub fn token_grid(&self, h: usize, w: usize) -> (usize, usize) {
        if h * w <= self.token_cap {
            return (h, w);
        }
        let f = (self.token_cap as f64 / (h * w) as f64).sqrt();
        let th = ((h as f64 * f).floor() as usize).clamp(1, h);
        let tw = ((w as f64 * f).floor() as usize).clamp(1, w);
        (th, tw)
    }

    /// Pool, flatten and project a feature map to `(b, T, d)` key/value tokens.
    pub fn embed_tokens(&self, features: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = features.dims4()?;
        let (th, tw) = self.token_grid(h, w);
        let pooled = adaptive_avg_pool(features, th, tw)?;
        self.embed.forward(&pooled.reshape((b, th * tw, c))?)
    }

    pub fn forward(&self, queries: &Tensor, features: &Tensor) -> Result<Tensor> {
        let tokens = self.embed_tokens(features)?;
        let h_hat = self.norm1.forward(&(self.cross.forward(queries, &tokens)? + queries)?)?;
        let h_tilde = self.norm2.forward(&(self.selfattn.forward(&h_hat, &h_hat)? + &h_hat)?)?;
        self.norm3.forward(&(self.ffl.forward(&h_tilde)? + &h_tilde)?)
    }
}
