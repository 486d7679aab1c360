//! Evaluation metrics over valid pixels.
//!
//! Heights are compared after shifting both maps by `offset_m − h_min`, so a
//! dataset whose lowest height is `h_min` starts at `offset_m` meters. Pixels
//! whose shifted ground truth is at or below `eps` are excluded and counted.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RmseMode {
    /// `sqrt(mean((pred − gt)²))` in meters.
    Literal,
    /// `sqrt(mean((ln pred − ln gt)²))`.
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsConfig {
    pub h_min: f64,
    pub offset_m: f64,
    pub eps: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            h_min: 0.0,
            offset_m: 1.0,
            eps: 1e-6,
        }
    }
}

impl MetricsConfig {
    /// Compare heights as given, without any shift.
    pub fn raw() -> Self {
        Self {
            h_min: 0.0,
            offset_m: 0.0,
            eps: 1e-6,
        }
    }

    /// Dataset minimum `h_min` is shifted to 1 m.
    pub fn for_range_min(h_min: f64) -> Self {
        Self {
            h_min,
            ..Self::default()
        }
    }
}

fn check_lengths(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::DimensionMismatch(format!(
            "pred {}, gt {}, mask {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// Running sums that pool pixels across any number of tiles.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricSums {
    pub valid: u64,
    pub excluded: u64,
    abs_rel: f64,
    sq_literal: f64,
    sq_log: f64,
    delta_hits: [u64; 3],
    non_positive_pred: u64,
}

impl MetricSums {
    /// Accumulate one tile. Heights are raw meters; the offset is applied here.
    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: &[bool], cfg: &MetricsConfig) -> Result<()> {
        check_lengths(pred, gt, mask)?;
        let shift = cfg.offset_m - cfg.h_min;
        for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
            if !m || !g.is_finite() {
                continue;
            }
            let g = g + shift;
            if g <= cfg.eps {
                self.excluded += 1;
                continue;
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("prediction {p} at a valid pixel")));
            }
            let p = p + shift;
            self.valid += 1;
            self.abs_rel += (p - g).abs() / g;
            self.sq_literal += (p - g) * (p - g);
            if p > cfg.eps {
                let d = p.ln() - g.ln();
                self.sq_log += d * d;
                let ratio = (p / g).max(g / p);
                for (k, hit) in self.delta_hits.iter_mut().enumerate() {
                    if ratio < 1.25f64.powi(k as i32 + 1) {
                        *hit += 1;
                    }
                }
            } else {
                self.non_positive_pred += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricSums) {
        self.valid += other.valid;
        self.excluded += other.excluded;
        self.abs_rel += other.abs_rel;
        self.sq_literal += other.sq_literal;
        self.sq_log += other.sq_log;
        for k in 0..3 {
            self.delta_hits[k] += other.delta_hits[k];
        }
        self.non_positive_pred += other.non_positive_pred;
    }

    fn require_valid(&self) -> Result<f64> {
        if self.valid == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(self.valid as f64)
    }

    pub fn rel(&self) -> Result<f64> {
        Ok(self.abs_rel / self.require_valid()?)
    }

    pub fn rmse(&self, mode: RmseMode) -> Result<f64> {
        let n = self.require_valid()?;
        match mode {
            RmseMode::Literal => Ok((self.sq_literal / n).sqrt()),
            RmseMode::Log => {
                if self.non_positive_pred > 0 {
                    return Err(Error::NonPositive {
                        index: 0,
                        value: f64::NAN,
                    });
                }
                Ok((self.sq_log / n).sqrt())
            }
        }
    }

    /// Fraction of pixels with `max(p/g, g/p) < 1.25^i`, `i` in 1..=3.
    pub fn delta(&self, i: usize) -> Result<f64> {
        if !(1..=3).contains(&i) {
            return Err(Error::Config(format!("delta threshold index must be 1, 2 or 3, got {i}")));
        }
        Ok(self.delta_hits[i - 1] as f64 / self.require_valid()?)
    }

    pub fn summary(&self, offset_m: f64) -> Result<MetricValues> {
        Ok(MetricValues {
            rel: self.rel()?,
            rmse_log_literal: self.rmse(RmseMode::Literal)?,
            rmse_log: if self.non_positive_pred > 0 {
                f64::NAN
            } else {
                self.rmse(RmseMode::Log)?
            },
            delta1: self.delta(1)?,
            delta2: self.delta(2)?,
            delta3: self.delta(3)?,
            valid_pixels: self.valid,
            excluded_pixels: self.excluded,
            offset_m,
        })
    }
}

fn sums(pred: &[f64], gt: &[f64], mask: &[bool], cfg: &MetricsConfig) -> Result<MetricSums> {
    let mut s = MetricSums::default();
    s.add(pred, gt, mask, cfg)?;
    if s.excluded > 0 {
        log::warn!("{} pixels at or below eps after offset were excluded", s.excluded);
    }
    Ok(s)
}

/// Mean of `|pred − gt| / gt` over valid pixels.
pub fn rel(pred: &[f64], gt: &[f64], mask: &[bool], cfg: &MetricsConfig) -> Result<f64> {
    sums(pred, gt, mask, cfg)?.rel()
}

pub fn rmse_log(pred: &[f64], gt: &[f64], mask: &[bool], mode: RmseMode, cfg: &MetricsConfig) -> Result<f64> {
    sums(pred, gt, mask, cfg)?.rmse(mode)
}

pub fn delta_acc(pred: &[f64], gt: &[f64], mask: &[bool], i: usize, cfg: &MetricsConfig) -> Result<f64> {
    sums(pred, gt, mask, cfg)?.delta(i)
}

/// One set of metric values. `rmse_log_literal` is the RMSE in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricValues {
    pub rel: f64,
    pub rmse_log_literal: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixels: u64,
    pub excluded_pixels: u64,
    pub offset_m: f64,
}

/// A named tile for [`evaluate`].
#[derive(Debug, Clone, Copy)]
pub struct TileView<'a> {
    pub name: &'a str,
    pub pred: &'a [f64],
    pub gt: &'a [f64],
    pub mask: &'a [bool],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileMetrics {
    pub name: String,
    pub values: MetricValues,
}

/// Pooled metrics plus per-tile values and their unweighted means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub pooled: MetricValues,
    pub per_tile_mean: MetricValues,
    pub tiles: Vec<TileMetrics>,
}

/// Pool every valid pixel across `tiles`. Tiles without valid pixels are
/// skipped for the per-tile listing but still contribute exclusions.
pub fn evaluate(tiles: &[TileView], cfg: &MetricsConfig) -> Result<MetricsReport> {
    let mut total = MetricSums::default();
    let mut per_tile = Vec::with_capacity(tiles.len());
    for t in tiles {
        let mut s = MetricSums::default();
        s.add(t.pred, t.gt, t.mask, cfg)?;
        total.merge(&s);
        if s.valid > 0 {
            per_tile.push(TileMetrics {
                name: t.name.to_string(),
                values: s.summary(cfg.offset_m)?,
            });
        }
    }
    if total.excluded > 0 {
        log::warn!("{} pixels at or below eps after offset were excluded", total.excluded);
    }
    let pooled = total.summary(cfg.offset_m)?;
    let k = per_tile.len() as f64;
    let mean = |f: fn(&MetricValues) -> f64| per_tile.iter().map(|t| f(&t.values)).sum::<f64>() / k;
    let per_tile_mean = MetricValues {
        rel: mean(|v| v.rel),
        rmse_log_literal: mean(|v| v.rmse_log_literal),
        rmse_log: mean(|v| v.rmse_log),
        delta1: mean(|v| v.delta1),
        delta2: mean(|v| v.delta2),
        delta3: mean(|v| v.delta3),
        valid_pixels: pooled.valid_pixels,
        excluded_pixels: pooled.excluded_pixels,
        offset_m: cfg.offset_m,
    };
    Ok(MetricsReport {
        pooled,
        per_tile_mean,
        tiles: per_tile,
    })
}

/// Six significant digits, JSON-safe (`null` for non-finite values).
pub fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return "null".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        return format!("{x:.5e}");
    }
    let s = format!("{:.*}", (5 - exp).max(0) as usize, x);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

const METRIC_KEYS: [&str; 6] = ["rel", "rmse_log_literal", "rmse_log", "delta1", "delta2", "delta3"];

fn metric_fields(v: &MetricValues) -> [f64; 6] {
    [v.rel, v.rmse_log_literal, v.rmse_log, v.delta1, v.delta2, v.delta3]
}

fn json_values(v: &MetricValues, counts: bool) -> String {
    let mut out = String::from("{");
    for (k, x) in METRIC_KEYS.iter().zip(metric_fields(v)) {
        let _ = write!(out, "\"{k}\": {}, ", format_sig6(x));
    }
    if counts {
        let _ = write!(
            out,
            "\"valid_pixels\": {}, \"excluded_pixels\": {}, \"offset_m\": {}, ",
            v.valid_pixels,
            v.excluded_pixels,
            format_sig6(v.offset_m)
        );
    }
    out.truncate(out.len() - 2);
    out.push('}');
    out
}

impl MetricsReport {
    /// JSON with a fixed key order.
    pub fn to_json(&self) -> String {
        let mut out = json_values(&self.pooled, true);
        out.truncate(out.len() - 1);
        let _ = write!(
            out,
            ", \"aggregation\": \"pooled\", \"per_tile_mean\": {}, \"tiles\": [",
            json_values(&self.per_tile_mean, false)
        );
        for (i, t) in self.tiles.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let v = json_values(&t.values, false);
            let name = serde_json::to_string(&t.name).unwrap_or_else(|_| "\"\"".into());
            let _ = write!(
                out,
                "{{\"name\": {name}, \"valid_pixels\": {}, {}",
                t.values.valid_pixels,
                &v[1..]
            );
        }
        out.push_str("]}");
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<18} {:>12} {:>14}\n", "metric", "pooled", "per-tile mean");
        for (k, (a, b)) in METRIC_KEYS
            .iter()
            .zip(metric_fields(&self.pooled).into_iter().zip(metric_fields(&self.per_tile_mean)))
        {
            let _ = writeln!(out, "{k:<18} {:>12} {:>14}", format_sig6(a), format_sig6(b));
        }
        let _ = writeln!(out, "{:<18} {:>12}", "valid_pixels", self.pooled.valid_pixels);
        let _ = writeln!(out, "{:<18} {:>12}", "excluded_pixels", self.pooled.excluded_pixels);
        let _ = write!(out, "{:<18} {:>12}", "offset_m", format_sig6(self.pooled.offset_m));
        out
    }
}
