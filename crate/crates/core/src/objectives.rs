//! Scale-invariant logarithmic training loss.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Scale factor α.
    pub alpha: f64,
    /// Variance weight λ.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            lambda: 0.85,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "loss needs alpha > 0 and 0 ≤ lambda ≤ 1, got alpha={} lambda={}",
                self.alpha, self.lambda
            )));
        }
        Ok(())
    }
}

/// Shift metric heights so the dataset minimum lands at `offset` meters,
/// keeping logs and ratios defined for datasets with negative heights.
pub fn offset_height(h: f64, h_min: f64, offset: f64) -> f64 {
    h - h_min + offset
}

/// `α·sqrt(Σg²/T − λ(Σg)²/T²)` with `g = ln pred − ln gt` over masked pixels.
///
/// Works on plain slices; `pred` and `gt` must be strictly positive wherever
/// `mask` is set.
pub fn silog_loss(pred: &[f64], gt: &[f64], mask: &[bool], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::DimensionMismatch(format!(
            "pred {}, gt {}, mask {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let (mut t, mut sum, mut sum_sq) = (0usize, 0.0f64, 0.0f64);
    for (i, ((&p, &g), &m)) in pred.iter().zip(gt).zip(mask).enumerate() {
        if !m {
            continue;
        }
        if !(p > 0.0) {
            return Err(Error::NonPositive { index: i, value: p });
        }
        if !(g > 0.0) {
            return Err(Error::NonPositive { index: i, value: g });
        }
        let d = p.ln() - g.ln();
        t += 1;
        sum += d;
        sum_sq += d * d;
    }
    if t == 0 {
        return Err(Error::EmptyMask);
    }
    let t = t as f64;
    let var = (sum_sq / t - cfg.lambda * (sum / t) * (sum / t)).max(0.0);
    Ok(cfg.alpha * var.sqrt())
}

/// Differentiable batch version: `pred`, `gt` and `mask` share a shape;
/// `mask` holds 1 for valid pixels and 0 elsewhere (any float dtype). Pixels
/// are pooled over the whole batch. Invalid `gt` entries may hold anything.
pub fn silog_loss_tensor(pred: &Tensor, gt: &Tensor, mask: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    if pred.dims() != gt.dims() || pred.dims() != mask.dims() {
        return Err(Error::DimensionMismatch(format!(
            "pred {:?}, gt {:?}, mask {:?}",
            pred.dims(),
            gt.dims(),
            mask.dims()
        )));
    }
    let mask = mask.to_dtype(pred.dtype())?;
    let t = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if t < 0.5 {
        return Err(Error::EmptyMask);
    }
    let valid = mask.gt(0.5)?;
    let ones = Tensor::ones_like(pred)?;
    let gt_safe = valid.where_cond(&gt.to_dtype(pred.dtype())?, &ones)?;
    let pred_safe = valid.where_cond(pred, &ones)?;
    let g = ((pred_safe.log()? - gt_safe.log()?)? * &mask)?;
    let mean = (g.sum_all()? / t)?;
    let mean_sq = (g.sqr()?.sum_all()? / t)?;
    let var = (mean_sq - (mean.sqr()? * cfg.lambda)?)?.relu()?;
    Ok((var.sqrt()? * cfg.alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    #[test]
    fn identical_maps_have_zero_loss() {
        let gt = [1.0, 2.0, 3.5];
        assert_eq!(silog_loss(&gt, &gt, &[true; 3], &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn uniform_scale_error_closed_form() {
        let gt = [1.0, 4.0, 9.0, 0.5];
        let pred: Vec<f64> = gt.iter().map(|g| 2.0 * g).collect();
        let l = silog_loss(&pred, &gt, &[true; 4], &LossConfig::default()).unwrap();
        let expect = 10.0 * 2f64.ln() * 0.15f64.sqrt();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 2.6845).abs() < 1e-4);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(
            silog_loss(&[1.0], &[1.0], &[false], &LossConfig::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn non_positive_heights_rejected() {
        assert!(matches!(
            silog_loss(&[0.0], &[1.0], &[true], &LossConfig::default()),
            Err(Error::NonPositive { .. })
        ));
    }

    #[test]
    fn tensor_version_agrees_and_ignores_masked_garbage() {
        let pred = [1.2, 0.7, 3.0, 9.0];
        let gt = [1.0, 1.0, f64::NAN, 2.0];
        let mask = [true, true, false, true];
        let cfg = LossConfig::default();
        let host = silog_loss(&pred, &gt, &mask, &cfg).unwrap();
        let d = Device::Cpu;
        let m: Vec<f64> = mask.iter().map(|&b| b as u8 as f64).collect();
        let t = silog_loss_tensor(
            &Tensor::new(&pred, &d).unwrap(),
            &Tensor::new(&gt, &d).unwrap(),
            &Tensor::new(m.as_slice(), &d).unwrap(),
            &cfg,
        )
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
        assert!((host - t).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(v in proptest::collection::vec((0.01f64..100.0, 0.01f64..100.0), 1..64), lambda in 0.0f64..=1.0) {
            let (pred, gt): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let mask = vec![true; pred.len()];
            let l = silog_loss(&pred, &gt, &mask, &LossConfig { alpha: 10.0, lambda }).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn full_variance_weight_is_scale_invariant(v in proptest::collection::vec((0.01f64..100.0, 0.01f64..100.0), 2..64), k in prop::sample::select(vec![0.5f64, 2.0, 10.0])) {
            let (pred, gt): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let mask = vec![true; pred.len()];
            let cfg = LossConfig { alpha: 10.0, lambda: 1.0 };
            let a = silog_loss(&pred, &gt, &mask, &cfg).unwrap();
            let scaled: Vec<f64> = pred.iter().map(|p| p * k).collect();
            let b = silog_loss(&scaled, &gt, &mask, &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
