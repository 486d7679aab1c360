//! Flat `section.key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! model.bins = 8
//! model.h_min = 0
//! train.epochs = 2
//! decoder.bin_source = fixed
//! ```

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{AugmentConfig, DEFAULT_SENTINEL};
use crate::error::{Error, Result};
use crate::height::HeightRange;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Where data lives and how it is cut.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Restrict the training set to these stems (empty keeps all).
    pub train_stems: Vec<String>,
    pub val_stems: Vec<String>,
    /// Scenes are cut into tiles of this size before training.
    pub tile: usize,
    pub sentinel: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            train_stems: Vec::new(),
            val_stems: Vec::new(),
            tile: 512,
            sentinel: DEFAULT_SENTINEL,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    explicit: BTreeSet<String>,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("`{key}` needs two comma-separated numbers, got `{v}`"))),
    }
}

fn parse_groups(key: &str, v: &str) -> Result<[usize; 3]> {
    match parse_list::<usize>(key, v)?.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Config(format!("`{key}` needs three comma-separated integers, got `{v}`"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if matches!(v, "none" | "off") {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_else(|| "none".into())
}

fn path(v: &Option<PathBuf>) -> String {
    v.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into())
}

impl RunConfig {
    /// Set one key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let e = &mut m.encoder;
        let d = &mut m.decoder;
        let t = &mut self.train;
        let a: &mut AugmentConfig = &mut t.augment;
        let data = &mut self.data;
        match key {
            "model.bins" => m.set_bins(parse(key, v)?),
            "model.h_min" => m.range.min = parse(key, v)?,
            "model.h_max" => m.range.max = parse(key, v)?,

            "encoder.channels_per_bin" => e.channels_per_bin = parse(key, v)?,
            "encoder.stem_width" => e.pixel.stem_width = parse(key, v)?,
            "encoder.stage_widths" => e.pixel.stage_widths = parse_list(key, v)?,
            "encoder.blocks_per_stage" => e.pixel.blocks_per_stage = parse_list(key, v)?,
            "encoder.norm_groups" => e.pixel.norm_groups = parse(key, v)?,
            "encoder.embed_dim" => e.patch.embed_dim = parse(key, v)?,
            "encoder.depths" => e.patch.depths = parse_list(key, v)?,
            "encoder.heads" => e.patch.heads = parse_list(key, v)?,
            "encoder.window" => e.patch.window = parse(key, v)?,
            "encoder.mlp_ratio" => e.patch.mlp_ratio = parse(key, v)?,
            "encoder.coupling_reduction" => e.coupling_reduction = parse(key, v)?,
            "encoder.coupling_gate" => e.coupling_gate = v.parse()?,

            "decoder.query_dim" => d.query_dim = parse(key, v)?,
            "decoder.heads" => d.heads = parse(key, v)?,
            "decoder.ffn_ratio" => d.ffn_ratio = parse(key, v)?,
            "decoder.token_cap" => d.token_cap = parse(key, v)?,
            "decoder.conv_groups" => d.conv_groups = parse_groups(key, v)?,
            "decoder.bin_mode" => d.bin_mode = v.parse()?,
            "decoder.bin_source" => d.bin_source = v.parse()?,
            "decoder.fixed_spacing" => d.fixed_spacing = v.parse()?,
            "decoder.norm_eps" => d.norm_eps = parse(key, v)?,

            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.warmup_fraction" => t.warmup_fraction = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse_opt(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse_opt(key, v)?,
            "train.loss_alpha" => t.loss.alpha = parse(key, v)?,
            "train.loss_lambda" => t.loss.lambda = parse(key, v)?,
            "train.augment" => t.augment_enabled = parse(key, v)?,
            "train.offset_m" => t.offset_m = parse(key, v)?,

            "augment.crop_size" => a.crop_size = parse(key, v)?,
            "augment.rotate_prob" => a.rotate_prob = parse(key, v)?,
            "augment.rotate_degrees" => a.rotate_degrees = parse(key, v)?,
            "augment.photo_prob" => a.photo_prob = parse(key, v)?,
            "augment.gamma_range" => a.gamma_range = parse_pair(key, v)?,
            "augment.brightness_range" => a.brightness_range = parse_pair(key, v)?,
            "augment.color_range" => a.color_range = parse_pair(key, v)?,

            "data.train" => data.train = parse_path(v),
            "data.val" => data.val = parse_path(v),
            "data.test" => data.test = parse_path(v),
            "data.train_stems" => data.train_stems = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "data.val_stems" => data.val_stems = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "data.tile" => data.tile = parse(key, v)?,
            "data.sentinel" => data.sentinel = parse(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Whether `key` was set by a file or override rather than defaulted.
    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let e = &m.encoder;
        let d = &m.decoder;
        let t = &self.train;
        let a = &t.augment;
        let data = &self.data;
        vec![
            ("model.bins", m.bins().to_string()),
            ("model.h_min", m.range.min.to_string()),
            ("model.h_max", m.range.max.to_string()),
            ("encoder.channels_per_bin", e.channels_per_bin.to_string()),
            ("encoder.stem_width", e.pixel.stem_width.to_string()),
            ("encoder.stage_widths", join(&e.pixel.stage_widths)),
            ("encoder.blocks_per_stage", join(&e.pixel.blocks_per_stage)),
            ("encoder.norm_groups", e.pixel.norm_groups.to_string()),
            ("encoder.embed_dim", e.patch.embed_dim.to_string()),
            ("encoder.depths", join(&e.patch.depths)),
            ("encoder.heads", join(&e.patch.heads)),
            ("encoder.window", e.patch.window.to_string()),
            ("encoder.mlp_ratio", e.patch.mlp_ratio.to_string()),
            ("encoder.coupling_reduction", e.coupling_reduction.to_string()),
            ("encoder.coupling_gate", e.coupling_gate.to_string()),
            ("decoder.query_dim", d.query_dim.to_string()),
            ("decoder.heads", d.heads.to_string()),
            ("decoder.ffn_ratio", d.ffn_ratio.to_string()),
            ("decoder.token_cap", d.token_cap.to_string()),
            ("decoder.conv_groups", join(&d.conv_groups)),
            ("decoder.bin_mode", d.bin_mode.to_string()),
            ("decoder.bin_source", d.bin_source.to_string()),
            ("decoder.fixed_spacing", d.fixed_spacing.to_string()),
            ("decoder.norm_eps", d.norm_eps.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.warmup_fraction", t.warmup_fraction.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.grad_clip", opt(&t.grad_clip)),
            ("train.seed", t.seed.to_string()),
            ("train.max_steps", opt(&t.max_steps)),
            ("train.loss_alpha", t.loss.alpha.to_string()),
            ("train.loss_lambda", t.loss.lambda.to_string()),
            ("train.augment", t.augment_enabled.to_string()),
            ("train.offset_m", t.offset_m.to_string()),
            ("augment.crop_size", a.crop_size.to_string()),
            ("augment.rotate_prob", a.rotate_prob.to_string()),
            ("augment.rotate_degrees", a.rotate_degrees.to_string()),
            ("augment.photo_prob", a.photo_prob.to_string()),
            ("augment.gamma_range", format!("{},{}", a.gamma_range.0, a.gamma_range.1)),
            ("augment.brightness_range", format!("{},{}", a.brightness_range.0, a.brightness_range.1)),
            ("augment.color_range", format!("{},{}", a.color_range.0, a.color_range.1)),
            ("data.train", path(&data.train)),
            ("data.val", path(&data.val)),
            ("data.test", path(&data.test)),
            ("data.train_stems", data.train_stems.join(",")),
            ("data.val_stems", data.val_stems.join(",")),
            ("data.tile", data.tile.to_string()),
            ("data.sentinel", data.sentinel.to_string()),
        ]
    }

    /// Apply `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Apply `key=value` overrides as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        HeightRange::new(self.model.range.min, self.model.range.max)?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.tile == 0 || self.data.tile % 32 != 0 {
            return Err(Error::Config(format!("data.tile must be a positive multiple of 32, got {}", self.data.tile)));
        }
        Ok(())
    }

    /// Resolved configuration as re-loadable text.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("model.bins = 8\ntrain.grad_clip = off\naugment.gamma_range = 0.8, 1.2\ndata.train = /tmp/x # trailing\ndecoder.bin_source = fixed")
            .unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.snapshot()).unwrap();
        assert_eq!(c.snapshot(), d.snapshot());
        assert!(d.is_set("model.h_min") && !c.is_set("model.h_min"));
        assert_eq!(d.model.decoder.bins, 8);
        assert_eq!(d.train.grad_clip, None);
    }

    #[test]
    fn every_listed_key_is_settable() {
        let c = RunConfig::default();
        let mut d = RunConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c.snapshot(), d.snapshot());
    }

    #[test]
    fn unknown_key_named() {
        let mut c = RunConfig::default();
        let err = c.apply_overrides(&["train.epoch=3"]).unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "train.epoch"));
        assert!(err.to_string().contains("train.epoch"));
    }

    #[test]
    fn bad_value_reports_key() {
        let mut c = RunConfig::default();
        let err = c.set("train.lr", "fast").unwrap_err().to_string();
        assert!(err.contains("train.lr"), "{err}");
    }
}
