//! Training loop, checkpoints, stitched prediction and benchmarking.

mod bench;
mod checkpoint;
mod optim;
mod predict;

pub use bench::{benchmark, hardware_descriptor, BenchmarkReport};
pub use checkpoint::{load_model, Checkpoint, CheckpointMeta, EpochRecord};
pub use optim::AdamW;
pub use predict::{feather_weights, predict_scene, Prediction};

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{apply_ops, AugmentConfig, AugmentOps, TilePair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsConfig, MetricsReport, TileView};
use crate::model::{HeightFormer, ModelConfig};
use crate::objectives::{silog_loss_tensor, LossConfig};
use crate::params::stream_rng;

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub augment_enabled: bool,
    /// Metric offset in meters above `h_min`; the loss uses the same shift.
    pub offset_m: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 2,
            lr: 1e-5,
            warmup_fraction: 0.125,
            weight_decay: 0.01,
            grad_clip: Some(10.0),
            seed: 0,
            max_steps: None,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            augment_enabled: true,
            offset_m: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train: epochs and batch_size must be at least 1".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!("train: warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction)));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.offset_m > 0.0) {
            return Err(Error::Config("train: lr and offset_m must be positive, weight_decay non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("train: grad_clip must be positive".into()));
            }
        }
        self.loss.validate()?;
        if self.augment_enabled {
            self.augment.validate()?;
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base` over the first `⌊total·warmup⌋` steps, then
/// linear decay to 0 at `total`.
pub fn lr_schedule(step: u64, total: u64, base: f64, warmup_fraction: f64) -> f64 {
    let step = step.min(total);
    let warm = (total as f64 * warmup_fraction).floor() as u64;
    if step <= warm {
        if warm == 0 {
            return if total == 0 { 0.0 } else { base * (total - step) as f64 / total as f64 };
        }
        return base * step as f64 / warm as f64;
    }
    base * (total - step) as f64 / (total - warm) as f64
}

/// Stack tiles into `(image (b,h,w,3), gt meters (b,h,w), mask (b,h,w))`.
/// Invalid ground-truth pixels hold 0.
pub fn batch_tensors(tiles: &[&TilePair], dtype: DType) -> Result<(Tensor, Tensor, Tensor)> {
    let first = tiles.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = first.size();
    let mut image = Vec::with_capacity(tiles.len() * h * w * 3);
    let mut gt = Vec::with_capacity(tiles.len() * h * w);
    let mut mask = Vec::with_capacity(tiles.len() * h * w);
    for t in tiles {
        if t.size() != (h, w) {
            return Err(Error::Shape(format!("batch mixes {h}×{w} and {:?} tiles", t.size())));
        }
        image.extend_from_slice(&t.pair.image);
        for (&d, &m) in t.pair.dsm.iter().zip(&t.pair.mask) {
            let ok = m && d.is_finite();
            gt.push(if ok { d } else { 0.0 });
            mask.push(if ok { 1.0f32 } else { 0.0 });
        }
    }
    let b = tiles.len();
    let dev = Device::Cpu;
    Ok((
        Tensor::from_vec(image, (b, h, w, 3), &dev)?.to_dtype(dtype)?,
        Tensor::from_vec(gt, (b, h, w), &dev)?.to_dtype(dtype)?,
        Tensor::from_vec(mask, (b, h, w), &dev)?.to_dtype(dtype)?,
    ))
}

/// One optimizer step's log record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_time: f64,
}

/// Owns the model, optimizer and schedule for one training run.
pub struct Trainer {
    model: HeightFormer,
    optim: AdamW,
    cfg: TrainConfig,
    tiles: Vec<TilePair>,
    total_steps: u64,
    steps_per_epoch: u64,
    history: Vec<EpochRecord>,
    started: Instant,
    out_dir: Option<PathBuf>,
    log: Option<File>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, tiles: Vec<TilePair>) -> Result<Self> {
        let model = HeightFormer::new(model_cfg, cfg.seed, DType::F32)?;
        Self::with_model(model, AdamW::new(cfg.weight_decay), cfg, tiles, Vec::new())
    }

    /// Continue a run from `ck`, which must hold optimizer state.
    pub fn resume(ck: &Checkpoint, cfg: &TrainConfig, tiles: Vec<TilePair>) -> Result<Self> {
        let model = ck.model()?;
        let optim = ck.optimizer(cfg.weight_decay)?;
        Self::with_model(model, optim, cfg, tiles, ck.meta.history.clone())
    }

    fn with_model(model: HeightFormer, optim: AdamW, cfg: &TrainConfig, tiles: Vec<TilePair>, history: Vec<EpochRecord>) -> Result<Self> {
        cfg.validate()?;
        if tiles.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let size = tiles[0].size();
        if let Some(t) = tiles.iter().find(|t| t.size() != size) {
            return Err(Error::Shape(format!("tile `{}` is {:?}, expected {size:?}", t.name, t.size())));
        }
        let crop = if cfg.augment_enabled { cfg.augment.crop_size } else { size.0.min(size.1) };
        if cfg.augment_enabled && (crop > size.0 || crop > size.1) {
            return Err(Error::Config(format!("crop size {crop} exceeds {size:?} tiles")));
        }
        let steps_per_epoch = tiles.len().div_ceil(cfg.batch_size) as u64;
        let mut total = steps_per_epoch * cfg.epochs as u64;
        if let Some(m) = cfg.max_steps {
            total = total.min(m);
        }
        Ok(Self {
            model,
            optim,
            cfg: cfg.clone(),
            tiles,
            total_steps: total,
            steps_per_epoch,
            history,
            started: Instant::now(),
            out_dir: None,
            log: None,
        })
    }

    /// Write checkpoints, the step log and diagnostics under `dir`.
    pub fn set_output_dir(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("train_log.jsonl");
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        self.out_dir = Some(dir.to_path_buf());
        self.log = Some(log);
        Ok(())
    }

    pub fn model(&self) -> &HeightFormer {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.optim.step_count()
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.step_count() >= self.total_steps
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let epoch = (self.step_count() / self.steps_per_epoch) as usize;
        Checkpoint::capture(&self.model, Some(&self.optim), Some(&self.cfg), epoch, &self.history)
    }

    /// Tiles of the batch at global `step`, after augmentation.
    fn batch(&self, step: u64) -> Result<Vec<TilePair>> {
        let epoch = step / self.steps_per_epoch;
        let within = (step % self.steps_per_epoch) as usize;
        let mut order: Vec<usize> = (0..self.tiles.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, STREAM_SHUFFLE, epoch));
        let start = within * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(order.len());
        order[start..end]
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                let t = &self.tiles[i];
                if !self.cfg.augment_enabled {
                    return Ok(t.clone());
                }
                let mut rng = stream_rng(self.cfg.seed, STREAM_AUGMENT, step * self.cfg.batch_size as u64 + j as u64);
                let ops = AugmentOps::sample(&mut rng, &self.cfg.augment, t.pair.rows, t.pair.cols)?;
                apply_ops(t, &ops)
            })
            .collect()
    }

    /// Loss on `tiles` as a differentiable scalar.
    pub fn loss(&self, tiles: &[&TilePair]) -> Result<Tensor> {
        let (image, gt, mask) = batch_tensors(tiles, self.model.dtype())?;
        let shift = self.cfg.offset_m - self.model.config().range.min;
        let out = self.model.forward(&image)?;
        let pred = out.meters().affine(1.0, shift)?;
        let gt = gt.affine(1.0, shift)?;
        silog_loss_tensor(&pred, &gt, &mask, &self.cfg.loss)
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::Config("training already finished".into()));
        }
        let step = self.step_count();
        let batch = self.batch(step)?;
        let refs: Vec<&TilePair> = batch.iter().collect();
        let loss = self.loss(&refs)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            let dump = self.dump_batch(step, &refs);
            return Err(Error::NonFinite(format!(
                "loss {value} at step {}; batch [{}]{}",
                step + 1,
                refs.iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join(", "),
                dump.map(|p| format!(", dumped to {}", p.display())).unwrap_or_default()
            )));
        }
        let grads = loss.backward()?;
        let scale = match self.cfg.grad_clip {
            Some(c) => {
                let norm = AdamW::grad_norm(self.model.params(), &grads)?;
                if !norm.is_finite() {
                    return Err(Error::NonFinite(format!("gradient norm {norm} at step {}", step + 1)));
                }
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let lr = lr_schedule(step + 1, self.total_steps, self.cfg.lr, self.cfg.warmup_fraction);
        self.optim.step(self.model.params(), &grads, lr, scale)?;
        let rec = StepRecord {
            step: step + 1,
            lr,
            loss: value,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io("train_log.jsonl", e))?;
        }
        Ok(rec)
    }

    fn dump_batch(&self, step: u64, tiles: &[&TilePair]) -> Option<PathBuf> {
        let dir = self.out_dir.as_ref()?;
        let path = dir.join(format!("nonfinite_step{}.safetensors", step + 1));
        let (image, gt, mask) = batch_tensors(tiles, DType::F32).ok()?;
        let names = tiles.iter().map(|t| t.name.clone()).collect::<Vec<_>>().join(",");
        let info = std::collections::HashMap::from([("tiles".to_string(), names)]);
        safetensors::serialize_to_file([("image", &image), ("gt", &gt), ("mask", &mask)], Some(info), &path).ok()?;
        Some(path)
    }

    /// Train until done, validating and checkpointing at every epoch end.
    /// `on_step` sees every step record.
    pub fn run(&mut self, val: &[TilePair], mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        let mut epoch_loss = Vec::new();
        let mut best_rel = self
            .history
            .iter()
            .filter_map(|h| h.val_rel)
            .fold(f64::INFINITY, f64::min);
        while !self.is_done() {
            let rec = self.step()?;
            on_step(&rec);
            epoch_loss.push(rec.loss);
            records.push(rec);
            let s = self.step_count();
            if s % self.steps_per_epoch == 0 || self.is_done() {
                let epoch = s.div_ceil(self.steps_per_epoch) as usize;
                let val_rel = if val.is_empty() {
                    None
                } else {
                    Some(validate(&self.model, val, self.cfg.offset_m)?.pooled.rel)
                };
                let train_loss = epoch_loss.iter().sum::<f64>() / epoch_loss.len() as f64;
                epoch_loss.clear();
                self.history.push(EpochRecord {
                    epoch,
                    step: s,
                    train_loss,
                    val_rel,
                });
                log::info!("epoch {epoch} step {s}: train loss {train_loss:.5} val rel {val_rel:?}");
                if let Some(dir) = self.out_dir.clone() {
                    let ck = self.checkpoint()?;
                    ck.save(&dir.join(format!("epoch_{epoch:03}.safetensors")))?;
                    ck.save(&dir.join("last.safetensors"))?;
                    if let Some(r) = val_rel.filter(|&r| r < best_rel) {
                        best_rel = r;
                        ck.save(&dir.join("best.safetensors"))?;
                    }
                }
            }
        }
        Ok(records)
    }
}

/// Whole-tile predictions in meters, one per tile.
pub fn predict_tiles(model: &HeightFormer, tiles: &[TilePair], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(batch.max(1)) {
        let refs: Vec<&TilePair> = chunk.iter().collect();
        let (image, _, _) = batch_tensors(&refs, model.dtype())?;
        let m = model.forward(&image)?.meters().to_dtype(DType::F64)?;
        for i in 0..chunk.len() {
            out.push(m.get(i)?.flatten_all()?.to_vec1::<f64>()?);
        }
    }
    Ok(out)
}

/// Pooled metrics of `model` on `tiles`.
pub fn validate(model: &HeightFormer, tiles: &[TilePair], offset_m: f64) -> Result<MetricsReport> {
    let preds = predict_tiles(model, tiles, 2)?;
    let gts: Vec<Vec<f64>> = tiles.iter().map(|t| t.pair.dsm.iter().map(|&d| d as f64).collect()).collect();
    let views: Vec<TileView> = tiles
        .iter()
        .zip(preds.iter().zip(&gts))
        .map(|(t, (p, g))| TileView {
            name: &t.name,
            pred: p,
            gt: g,
            mask: &t.pair.mask,
        })
        .collect();
    let cfg = MetricsConfig {
        h_min: model.config().range.min,
        offset_m,
        ..MetricsConfig::default()
    };
    evaluate(&views, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let total = 800;
        assert_eq!(lr_schedule(0, total, 1e-5, 0.125), 0.0);
        assert_eq!(lr_schedule(100, total, 1e-5, 0.125), 1e-5);
        assert_eq!(lr_schedule(total, total, 1e-5, 0.125), 0.0);
        assert!((lr_schedule(50, total, 1e-5, 0.125) - 5e-6).abs() < 1e-18);
        assert!((lr_schedule(450, total, 1e-5, 0.125) - 5e-6).abs() < 1e-18);
    }

    #[test]
    fn schedule_peaks_at_warmup_boundary() {
        let total = 97;
        let lrs: Vec<f64> = (0..=total).map(|s| lr_schedule(s, total, 1.0, 0.125)).collect();
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        assert_eq!(peak, 1.0);
        assert_eq!(lrs[12], 1.0);
        // continuity: no jump bigger than one ramp increment
        assert!(lrs.windows(2).all(|w| (w[1] - w[0]).abs() <= 1.0 / 12.0 + 1e-12));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
