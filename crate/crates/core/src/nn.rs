//! Layer primitives over channels-last tensors.
//!
//! Feature maps are `(batch, rows, cols, channels)` throughout. Convolutions
//! are a sum over kernel offsets of shifted slices times per-offset weight
//! matrices, so both directions stay on the GEMM path and differentiate
//! with plain tensor ops.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::params::ParamBuilder;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// Weight `[out, in]`, truncated-normal σ=0.02, zero bias.
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = pb.trunc_normal("weight", (out_dim, in_dim), 0.02)?;
        let bias = if bias { Some(pb.zeros("bias", out_dim)?) } else { None };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (out_dim, in_dim) = weight.dims2()?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        if last != self.in_dim {
            return Err(Error::Shape(format!(
                "linear expects last dim {}, got {:?}",
                self.in_dim, dims
            )));
        }
        let rows = x.elem_count() / last;
        let mut y = x.reshape((rows, last))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: pb.ones("weight", dim)?,
            bias: pb.zeros("bias", dim)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalisation over `(rows, cols, channels-in-group)` of a
/// channels-last map.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, channels: usize, groups: usize, eps: f64) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "group norm: {groups} groups do not divide {channels} channels"
            )));
        }
        Ok(Self {
            weight: pb.ones("weight", channels)?,
            bias: pb.zeros("bias", channels)?,
            groups,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((b, h * w, g, c / g))?;
        let mean = xg.mean_keepdim(3)?.mean_keepdim(1)?;
        let xc = xg.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, h, w, c))?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// 2-D convolution on channels-last maps. The weight is stored in the usual
/// `[out, in/groups, k, k]` layout.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, spec: ConvSpec) -> Result<Self> {
        let g = spec.groups;
        if g == 0 || in_ch % g != 0 || out_ch % g != 0 {
            return Err(Error::Config(format!(
                "conv: {g} groups must divide in={in_ch} and out={out_ch}"
            )));
        }
        let k = spec.kernel;
        let fan_in = in_ch / g * k * k;
        let weight = pb.he_normal("weight", (out_ch, in_ch / g, k, k), fan_in)?;
        let bias = if spec.bias { Some(pb.zeros("bias", out_ch)?) } else { None };
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            groups: g,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::Shape(format!("conv kernel {k} larger than padded input {h}x{w}")));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let (ho, wo) = self.output_size(h, w)?;
        let k = self.kernel;
        let m = b * ho * wo;
        let (g, cg, og) = (self.groups, c / self.groups, self.out_ch / self.groups);
        // weight as (k·k, g, cg, og): one small matrix per kernel offset and group
        let wk = self
            .weight
            .reshape((g, og, cg, k, k))?
            .permute((3, 4, 0, 2, 1))?
            .contiguous()?
            .reshape((k * k, g, cg, og))?;
        let slices = if k == 1 && self.padding == 0 {
            vec![subsample(x, self.stride, ho, wo)?]
        } else {
            kernel_slices(x, k, self.stride, self.padding, ho, wo, 0.0)?
        };
        // Σ over offsets of slice @ W_offset, which avoids materialising the
        // (m, k·k·c) patch matrix
        let mut acc: Option<Tensor> = None;
        for (i, s) in slices.iter().enumerate() {
            let w_i = wk.get(i)?;
            let term = if g == 1 {
                s.reshape((m, c))?.matmul(&w_i.squeeze(0)?)?
            } else {
                s.reshape((m, g, cg))?.transpose(0, 1)?.contiguous()?.matmul(&w_i)?
            };
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        let y = acc.expect("at least one kernel offset");
        let y = if g == 1 {
            y
        } else {
            y.transpose(0, 1)?.contiguous()?.reshape((m, self.out_ch))?
        };
        let y = match &self.bias {
            Some(bias) => y.broadcast_add(bias)?,
            None => y,
        };
        Ok(y.reshape((b, ho, wo, self.out_ch))?)
    }
}

/// Every `step`-th slice along `dim`, starting at `start`, `count` entries.
pub(crate) fn strided(x: &Tensor, dim: usize, start: usize, count: usize, step: usize) -> Result<Tensor> {
    if step == 1 {
        return Ok(x.narrow(dim, start, count)?);
    }
    let avail = x.dim(dim)? - start;
    let t = if avail >= count * step {
        x.narrow(dim, start, count * step)?
    } else {
        x.narrow(dim, start, avail)?.pad_with_zeros(dim, 0, count * step - avail)?
    };
    let mut dims = t.dims().to_vec();
    dims[dim] = count;
    dims.insert(dim + 1, step);
    Ok(t.reshape(dims)?.narrow(dim + 1, 0, 1)?.squeeze(dim + 1)?)
}

/// Pad rows/cols of a channels-last map with a constant.
pub fn pad_hw(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize, value: f64) -> Result<Tensor> {
    let mut t = x.clone();
    if value == 0.0 {
        if top + bottom > 0 {
            t = t.pad_with_zeros(1, top, bottom)?;
        }
        if left + right > 0 {
            t = t.pad_with_zeros(2, left, right)?;
        }
        return Ok(t);
    }
    let fill = |t: &Tensor, dim: usize, n: usize| -> Result<Tensor> {
        let mut dims = t.dims().to_vec();
        dims[dim] = n;
        Ok((Tensor::ones(dims, t.dtype(), t.device())? * value)?)
    };
    if top + bottom > 0 {
        let mut parts = Vec::new();
        if top > 0 {
            parts.push(fill(&t, 1, top)?);
        }
        parts.push(t.clone());
        if bottom > 0 {
            parts.push(fill(&t, 1, bottom)?);
        }
        t = Tensor::cat(&parts, 1)?;
    }
    if left + right > 0 {
        let mut parts = Vec::new();
        if left > 0 {
            parts.push(fill(&t, 2, left)?);
        }
        parts.push(t.clone());
        if right > 0 {
            parts.push(fill(&t, 2, right)?);
        }
        t = Tensor::cat(&parts, 2)?;
    }
    Ok(t)
}

/// Shifted kernel windows of a channels-last map: `k*k` slices, each
/// `(b, ho, wo, c)`, in `(ky, kx)` row-major order.
fn kernel_slices(x: &Tensor, k: usize, stride: usize, padding: usize, ho: usize, wo: usize, fill: f64) -> Result<Vec<Tensor>> {
    let (_, h, w, _) = x.dims4()?;
    let need_h = (k - 1) + ho * stride;
    let need_w = (k - 1) + wo * stride;
    let extra_h = need_h.saturating_sub(h + 2 * padding);
    let extra_w = need_w.saturating_sub(w + 2 * padding);
    let xp = pad_hw(x, padding, padding + extra_h, padding, padding + extra_w, fill)?;
    let mut out = Vec::with_capacity(k * k);
    for ky in 0..k {
        let rows = strided(&xp, 1, ky, ho, stride)?;
        for kx in 0..k {
            out.push(strided(&rows, 2, kx, wo, stride)?);
        }
    }
    Ok(out)
}

/// Input positions seen by an unpadded 1×1 kernel.
fn subsample(x: &Tensor, stride: usize, ho: usize, wo: usize) -> Result<Tensor> {
    if stride == 1 {
        return Ok(x.clone());
    }
    let rows = strided(x, 1, 0, ho, stride)?;
    strided(&rows, 2, 0, wo, stride)
}

/// Max pooling on a channels-last map, padding with `-inf`-like fill.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let slices = kernel_slices(x, k, stride, padding, ho, wo, -1e30)?;
    let mut acc = slices[0].clone();
    for s in &slices[1..] {
        acc = acc.maximum(s)?;
    }
    Ok(acc)
}

/// Softmax along `dim`; the running max is treated as a constant.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    softmax(x, x.rank() - 1)
}

/// Row-stochastic bilinear interpolation matrix `(out, in)`, half-pixel
/// centres (the `align_corners = false` convention).
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let l1 = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - l1;
        m[o * in_len + i1] += l1;
    }
    m
}

/// Averaging matrix `(out, in)` for adaptive average pooling.
pub fn adaptive_pool_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for o in 0..out_len {
        let start = o * in_len / out_len;
        let end = ((o + 1) * in_len).div_ceil(out_len);
        let n = (end - start) as f64;
        for i in start..end {
            m[o * in_len + i] = 1.0 / n;
        }
    }
    m
}

fn matrix_tensor(m: Vec<f64>, rows: usize, cols: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(m, (rows, cols), device)?.to_dtype(dtype)?)
}

/// Apply separable row/column matrices `a_rows (ho, h)` and `a_cols (wo, w)`
/// to a channels-last map.
fn separable_apply(x: &Tensor, a_rows: &Tensor, a_cols: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let ho = a_rows.dim(0)?;
    let wo = a_cols.dim(0)?;
    let t = a_rows.broadcast_matmul(&x.reshape((b, h, w * c))?)?;
    let t = t.reshape((b, ho, w, c))?.transpose(1, 2)?.contiguous()?.reshape((b, w, ho * c))?;
    let t = a_cols.broadcast_matmul(&t)?;
    Ok(t.reshape((b, wo, ho, c))?.transpose(1, 2)?.contiguous()?)
}

pub fn resize_bilinear(x: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    if (h, w) == (ho, wo) {
        return Ok(x.clone());
    }
    let a = matrix_tensor(bilinear_matrix(h, ho), ho, h, x.dtype(), x.device())?;
    let bm = matrix_tensor(bilinear_matrix(w, wo), wo, w, x.dtype(), x.device())?;
    separable_apply(x, &a, &bm)
}

pub fn adaptive_avg_pool(x: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    let (_, h, w, _) = x.dims4()?;
    if (h, w) == (ho, wo) {
        return Ok(x.clone());
    }
    let a = matrix_tensor(adaptive_pool_matrix(h, ho), ho, h, x.dtype(), x.device())?;
    let bm = matrix_tensor(adaptive_pool_matrix(w, wo), wo, w, x.dtype(), x.device())?;
    separable_apply(x, &a, &bm)
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut pb.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::new(&mut pb.pp("fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// Scaled dot-product attention over `(batch, heads, tokens, head_dim)`
/// tensors, with an optional additive mask broadcastable to the score shape.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let hd = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    let attn = softmax_last(&scores)?;
    Ok(attn.matmul(v)?)
}

/// `(b, t, heads*hd)` → `(b, heads, t, hd)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, c) = x.dims3()?;
    if c % heads != 0 {
        return Err(Error::Shape(format!("{heads} heads do not divide width {c}")));
    }
    Ok(x.reshape((b, t, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, hd) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, t, h * hd))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ParamStore};

    fn naive_conv(x: &[f64], (h, w, c): (usize, usize, usize), wt: &[f64], out: usize, k: usize, s: usize, p: usize, g: usize) -> (Vec<f64>, usize, usize) {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let cg = c / g;
        let og = out / g;
        let mut y = vec![0.0; ho * wo * out];
        for oy in 0..ho {
            for ox in 0..wo {
                for o in 0..out {
                    let grp = o / og;
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cg {
                                let cin = grp * cg + ci;
                                let xv = x[(iy as usize * w + ix as usize) * c + cin];
                                let wv = wt[((o * cg + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[(oy * wo + ox) * out + o] = acc;
                }
            }
        }
        (y, ho, wo)
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(k, s, p, g) in &[(3, 1, 1, 1), (3, 2, 1, 1), (7, 2, 3, 1), (1, 1, 0, 1), (3, 1, 1, 2), (1, 2, 0, 1)] {
            let (h, w, c, out) = (9, 7, 4, 6);
            let mut store = ParamStore::new(DType::F64, Device::Cpu);
            let mut rng = seeded_rng(11);
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            let spec = ConvSpec { kernel: k, stride: s, padding: p, groups: g, bias: false };
            let conv = Conv2d::new(&mut pb, c, out, spec).unwrap();
            let xv: Vec<f64> = (0..h * w * c).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
            let x = Tensor::from_vec(xv.clone(), (1, h, w, c), &Device::Cpu).unwrap();
            let y = conv.forward(&x).unwrap();
            let wt: Vec<f64> = conv.weight.flatten_all().unwrap().to_vec1().unwrap();
            let (expect, ho, wo) = naive_conv(&xv, (h, w, c), &wt, out, k, s, p, g);
            assert_eq!(y.dims(), &[1, ho, wo, out]);
            let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p} g={g}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_identity_at_same_size() {
        let m = bilinear_matrix(4, 16);
        for r in m.chunks(4) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let id = bilinear_matrix(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(id[i * 5 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn bilinear_upsample_preserves_constants() {
        let x = Tensor::ones((1, 3, 5, 2), DType::F64, &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 12, 20).unwrap();
        assert_eq!(y.dims(), &[1, 12, 20, 2]);
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn adaptive_pool_is_mean_when_divisible() {
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((1, 4, 4, 1)).unwrap();
        let y = adaptive_avg_pool(&x, 2, 2).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((1, 4, 4, 1)).unwrap();
        let y = max_pool2d(&x, 3, 2, 1).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Tensor::new(&[[1f64, 2.0, 3.0], [-1000.0, 0.0, 1000.0]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
