//! Window-restricted multi-head self-attention with optional cyclic shift.

use candle_core::{Device, DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{merge_heads, pad_hw, softmax_last, split_heads, Linear};
use crate::params::ParamBuilder;

/// Additive score for disallowed token pairs.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    /// Window side length in feature cells.
    pub size: usize,
    pub shift: usize,
}

impl WindowSpec {
    pub fn new(size: usize, shift: usize) -> Result<Self> {
        if size == 0 || shift >= size {
            return Err(Error::Config(format!("window size {size} with shift {shift}: need size ≥ 1 and shift < size")));
        }
        Ok(Self { size, shift })
    }

    pub fn regular(size: usize) -> Self {
        Self { size, shift: 0 }
    }

    pub fn shifted(size: usize) -> Self {
        Self { size, shift: size / 2 }
    }
}

/// Cyclic roll of the spatial axes so that output `(i, j)` holds input
/// `(i + offset, j + offset)` (indices modulo the map size).
pub fn window_shift(x: &Tensor, offset: usize) -> Result<Tensor> {
    roll_hw(x, -(offset as i64))
}

/// Inverse of [`window_shift`].
pub fn window_unshift(x: &Tensor, offset: usize) -> Result<Tensor> {
    roll_hw(x, offset as i64)
}

fn roll_hw(x: &Tensor, by: i64) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    let rh = by.rem_euclid(h as i64) as i32;
    let rw = by.rem_euclid(w as i64) as i32;
    let mut t = x.clone();
    if rh != 0 {
        t = t.roll(rh, 1)?;
    }
    if rw != 0 {
        t = t.roll(rw, 2)?;
    }
    Ok(t)
}

/// Multiply-accumulate counts `(global, windowed)` for self-attention over an
/// `h×w×c` map: `4hwC² + 2(hw)²C` and `4hwC² + 2M²hwC`.
pub fn attention_cost(h: u64, w: u64, c: u64, m: u64) -> (u64, u64) {
    let hw = h * w;
    let proj = 4 * hw * c * c;
    (proj + 2 * hw * hw * c, proj + 2 * m * m * hw * c)
}

/// `(b, hp, wp, c)` → `(b·nW, M², c)` with windows in row-major order.
fn partition(x: &Tensor, m: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / m, m, w / m, m, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / m) * (w / m), m * m, c))?)
}

fn unpartition(x: &Tensor, m: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(2)?;
    Ok(x.reshape((b, h / m, w / m, m, m, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

/// Additive mask `(nW, M², M²)` for a padded `hp×wp` grid whose valid part is
/// `h×w`, after a shift by `s`. A key is visible to a query when both came
/// from the same contiguous region of the unshifted map and the key is not
/// padding. Returns `None` when nothing needs masking.
fn build_mask(h: usize, w: usize, hp: usize, wp: usize, m: usize, s: usize, dtype: DType, device: &Device) -> Result<Option<Tensor>> {
    if s == 0 && h == hp && w == wp {
        return Ok(None);
    }
    let region = |i: usize, len: usize| -> usize {
        if s == 0 {
            0
        } else if i < len - m {
            0
        } else if i < len - s {
            1
        } else {
            2
        }
    };
    let (nwh, nww) = (hp / m, wp / m);
    let t = m * m;
    let mut mask = vec![0.0f64; nwh * nww * t * t];
    let mut labels = vec![0usize; t];
    let mut valid = vec![false; t];
    for wy in 0..nwh {
        for wx in 0..nww {
            for py in 0..m {
                for px in 0..m {
                    let (i, j) = (wy * m + py, wx * m + px);
                    let oi = (i + s) % hp;
                    let oj = (j + s) % wp;
                    labels[py * m + px] = region(i, hp) * 3 + region(j, wp);
                    valid[py * m + px] = oi < h && oj < w;
                }
            }
            let base = (wy * nww + wx) * t * t;
            for q in 0..t {
                for k in 0..t {
                    if labels[q] != labels[k] || !valid[k] {
                        mask[base + q * t + k] = MASKED;
                    }
                }
            }
        }
    }
    Ok(Some(Tensor::from_vec(mask, (nwh * nww, t, t), device)?.to_dtype(dtype)?))
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    dim: usize,
}

impl WindowAttention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            qkv: Linear::new(&mut pb.pp("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&mut pb.pp("proj"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Query/key/value projections of a token sequence `(b, t, c)`, each split
    /// into heads.
    pub fn qkv(&self, tokens: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let qkv = self.qkv.forward(tokens)?;
        let c = self.dim;
        Ok((
            split_heads(&qkv.narrow(2, 0, c)?, self.heads)?,
            split_heads(&qkv.narrow(2, c, c)?, self.heads)?,
            split_heads(&qkv.narrow(2, 2 * c, c)?, self.heads)?,
        ))
    }

    pub fn output_projection(&self) -> &Linear {
        &self.proj
    }

    /// Attention restricted to `spec.size`-sided windows of a channels-last
    /// map; maps whose sides are not multiples of the window are zero-padded
    /// on the bottom/right, the padding is masked out of every window and
    /// cropped afterwards.
    pub fn forward(&self, x: &Tensor, spec: WindowSpec) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.dim {
            return Err(Error::Shape(format!("window attention expects width {}, got {c}", self.dim)));
        }
        let m = spec.size;
        let s = spec.shift;
        let hp = h.div_ceil(m) * m;
        let wp = w.div_ceil(m) * m;
        let xp = pad_hw(x, 0, hp - h, 0, wp - w, 0.0)?;
        let xs = if s > 0 { window_shift(&xp, s)? } else { xp };
        let windows = partition(&xs, m)?;
        let n_win = (hp / m) * (wp / m);
        let t = m * m;

        let (q, k, v) = self.qkv(&windows)?;
        let hd = c / self.heads;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let scores = match build_mask(h, w, hp, wp, m, s, x.dtype(), x.device())? {
            Some(mask) => scores
                .reshape((b, n_win, self.heads, t, t))?
                .broadcast_add(&mask.reshape((1, n_win, 1, t, t))?)?
                .reshape((b * n_win, self.heads, t, t))?,
            None => scores,
        };
        let attn = softmax_last(&scores)?;
        let out = merge_heads(&attn.matmul(&v)?)?;
        let out = self.proj.forward(&out)?;

        let out = unpartition(&out, m, b, hp, wp)?;
        let out = if s > 0 { window_unshift(&out, s)? } else { out };
        if hp != h || wp != w {
            Ok(out.narrow(1, 0, h)?.narrow(2, 0, w)?.contiguous()?)
        } else {
            Ok(out)
        }
    }
}
