use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ScenePair, TilePair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub rotate_prob: f64,
    /// Rotation angle is drawn from `[-rotate_degrees, rotate_degrees]`.
    pub rotate_degrees: f64,
    pub photo_prob: f64,
    pub gamma_range: (f64, f64),
    pub brightness_range: (f64, f64),
    /// Saturation multiplier range.
    pub color_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: 448,
            rotate_prob: 0.5,
            rotate_degrees: 2.5,
            photo_prob: 0.5,
            gamma_range: (0.9, 1.1),
            brightness_range: (0.75, 1.25),
            color_range: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    /// Crop only.
    pub fn crop_only(crop_size: usize) -> Self {
        Self {
            crop_size,
            rotate_prob: 0.0,
            photo_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.rotate_prob) || !prob_ok(self.photo_prob) {
            return Err(Error::Config("augment probabilities must lie in [0, 1]".into()));
        }
        for (name, (lo, hi)) in [
            ("gamma_range", self.gamma_range),
            ("brightness_range", self.brightness_range),
            ("color_range", self.color_range),
        ] {
            if !(lo <= hi) || lo <= 0.0 {
                return Err(Error::Config(format!("augment {name} must satisfy 0 < lo ≤ hi, got ({lo}, {hi})")));
            }
        }
        if self.crop_size == 0 || !(self.rotate_degrees >= 0.0) {
            return Err(Error::Config("augment crop_size must be positive and rotate_degrees ≥ 0".into()));
        }
        Ok(())
    }
}

/// One concrete draw of the random transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOps {
    pub crop_origin: (usize, usize),
    pub crop_size: usize,
    /// Counter-clockwise degrees; `None` skips rotation.
    pub rotation: Option<f64>,
    pub gamma: f64,
    pub brightness: f64,
    pub color: f64,
}

impl AugmentOps {
    pub fn identity(crop_size: usize) -> Self {
        Self {
            crop_origin: (0, 0),
            crop_size,
            rotation: None,
            gamma: 1.0,
            brightness: 1.0,
            color: 1.0,
        }
    }

    pub fn sample(rng: &mut impl Rng, cfg: &AugmentConfig, rows: usize, cols: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.crop_size > rows || cfg.crop_size > cols {
            return Err(Error::Shape(format!(
                "crop size {} exceeds {rows}×{cols} tile",
                cfg.crop_size
            )));
        }
        let crop_origin = (
            rng.random_range(0..=rows - cfg.crop_size),
            rng.random_range(0..=cols - cfg.crop_size),
        );
        let rotation = if rng.random::<f64>() < cfg.rotate_prob {
            Some(rng.random_range(-cfg.rotate_degrees..=cfg.rotate_degrees))
        } else {
            None
        };
        let photo = rng.random::<f64>() < cfg.photo_prob;
        let mut draw = |(lo, hi): (f64, f64)| if photo { rng.random_range(lo..=hi) } else { 1.0 };
        let gamma = draw(cfg.gamma_range);
        let brightness = draw(cfg.brightness_range);
        let color = draw(cfg.color_range);
        Ok(Self {
            crop_origin,
            crop_size: cfg.crop_size,
            rotation,
            gamma,
            brightness,
            color,
        })
    }
}

/// Random crop, rotation and photometric jitter.
pub fn augment(pair: &TilePair, rng: &mut impl Rng, cfg: &AugmentConfig) -> Result<TilePair> {
    let ops = AugmentOps::sample(rng, cfg, pair.pair.rows, pair.pair.cols)?;
    apply_ops(pair, &ops)
}

pub fn apply_ops(pair: &TilePair, ops: &AugmentOps) -> Result<TilePair> {
    let rotated;
    let src = match ops.rotation {
        Some(deg) if deg != 0.0 => {
            rotated = rotate_pair(&pair.pair, deg);
            &rotated
        }
        _ => &pair.pair,
    };
    let (r, c) = ops.crop_origin;
    let mut out = src.window(r, c, ops.crop_size, ops.crop_size)?;
    photometric(&mut out.image, ops.gamma, ops.brightness, ops.color);
    Ok(TilePair {
        name: pair.name.clone(),
        pair: out,
        origin: (pair.origin.0 + r, pair.origin.1 + c),
    })
}

fn photometric(image: &mut [f32], gamma: f64, brightness: f64, color: f64) {
    if gamma == 1.0 && brightness == 1.0 && color == 1.0 {
        return;
    }
    let (g, b, s) = (gamma as f32, brightness as f32, color as f32);
    for px in image.chunks_exact_mut(3) {
        for v in px.iter_mut() {
            *v = (v.max(0.0).powf(g) * b).clamp(0.0, 1.0);
        }
        let grey = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v = (grey + s * (*v - grey)).clamp(0.0, 1.0);
        }
    }
}

/// Rotate image, DSM and mask about the tile centre by `degrees`
/// (counter-clockwise) with bilinear sampling. Output pixels whose source
/// footprint leaves the frame or touches an invalid pixel are masked out.
pub fn rotate_pair(p: &ScenePair, degrees: f64) -> ScenePair {
    let (rows, cols) = (p.rows, p.cols);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let mut out = ScenePair {
        rows,
        cols,
        image: vec![0.0; rows * cols * 3],
        dsm: vec![0.0; rows * cols],
        mask: vec![false; rows * cols],
        range: p.range,
        resolution: p.resolution,
    };
    for r in 0..rows {
        for c in 0..cols {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            // inverse rotation: where in the source does this pixel come from
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let i = r * cols + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            if x0 < 0.0 || y0 < 0.0 || sx > (cols - 1) as f64 || sy > (rows - 1) as f64 {
                out.dsm[i] = f32::NAN;
                continue;
            }
            let (x0, y0) = (x0 as usize, y0 as usize);
            let (x1, y1) = ((x0 + 1).min(cols - 1), (y0 + 1).min(rows - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            let taps = [
                (y0 * cols + x0, (1.0 - fx) * (1.0 - fy)),
                (y0 * cols + x1, fx * (1.0 - fy)),
                (y1 * cols + x0, (1.0 - fx) * fy),
                (y1 * cols + x1, fx * fy),
            ];
            let valid = taps.iter().all(|&(j, w)| w == 0.0 || p.mask[j]);
            for ch in 0..3 {
                out.image[3 * i + ch] = taps.iter().map(|&(j, w)| w * p.image[3 * j + ch]).sum();
            }
            if valid {
                out.dsm[i] = taps.iter().filter(|&&(_, w)| w != 0.0).map(|&(j, w)| w * p.dsm[j]).sum();
                out.mask[i] = true;
            } else {
                out.dsm[i] = f32::NAN;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::height::HeightRange;
    use crate::params::seeded_rng;

    fn coord_tile(n: usize) -> TilePair {
        let mut image = Vec::with_capacity(n * n * 3);
        let mut dsm = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let (u, v) = (r as f32 / n as f32, c as f32 / n as f32);
                image.extend_from_slice(&[u, v, 0.5 + 0.25 * (u - v)]);
                dsm.push((r * n + c) as f32);
            }
        }
        TilePair::from_scene(
            "t",
            ScenePair {
                rows: n,
                cols: n,
                image,
                dsm,
                mask: vec![true; n * n],
                range: HeightRange::new(0.0, (n * n) as f64).unwrap(),
                resolution: 1.0,
            },
        )
    }

    #[test]
    fn pure_crop_copies_window() {
        let t = coord_tile(64);
        let mut ops = AugmentOps::identity(48);
        ops.crop_origin = (5, 9);
        let out = apply_ops(&t, &ops).unwrap();
        assert_eq!(out.pair.dsm, t.pair.window(5, 9, 48, 48).unwrap().dsm);
        assert_eq!(out.pair.image, t.pair.window(5, 9, 48, 48).unwrap().image);
    }

    #[test]
    fn zero_probabilities_never_transform() {
        let t = coord_tile(32);
        let mut rng = seeded_rng(3);
        let out = augment(&t, &mut rng, &AugmentConfig::crop_only(32)).unwrap();
        assert_eq!(out.pair, t.pair);
    }

    #[test]
    fn crop_larger_than_tile_rejected() {
        let t = coord_tile(16);
        let mut rng = seeded_rng(0);
        assert!(augment(&t, &mut rng, &AugmentConfig::crop_only(32)).is_err());
    }

    #[test]
    fn rotation_round_trip_on_interior() {
        let t = coord_tile(64);
        let there = rotate_pair(&t.pair, 2.5);
        let back = rotate_pair(&there, -2.5);
        for r in 8..56 {
            for c in 8..56 {
                let i = r * 64 + c;
                for ch in 0..3 {
                    assert!((back.image[3 * i + ch] - t.pair.image[3 * i + ch]).abs() < 1e-2);
                }
            }
        }
    }

    #[test]
    fn rotation_moves_image_and_dsm_together() {
        // dsm holds the flat index; the first image channel holds row/n and
        // the second col/n, so both must agree on where each pixel came from
        let n = 48;
        let t = coord_tile(n);
        let rot = rotate_pair(&t.pair, 2.0);
        for i in 0..n * n {
            if !rot.mask[i] {
                continue;
            }
            let (u, v) = (rot.image[3 * i] * n as f32, rot.image[3 * i + 1] * n as f32);
            let from_dsm = rot.dsm[i];
            assert!((from_dsm - (u * n as f32 + v)).abs() < 1e-2, "pixel {i}");
        }
        assert!(rot.mask.iter().any(|m| !m), "corners rotate in from outside");
    }

    #[test]
    fn photometrics_leave_dsm_alone() {
        let t = coord_tile(16);
        let mut ops = AugmentOps::identity(16);
        ops.gamma = 1.1;
        ops.brightness = 0.8;
        ops.color = 0.9;
        let out = apply_ops(&t, &ops).unwrap();
        assert_eq!(out.pair.dsm, t.pair.dsm);
        assert_ne!(out.pair.image, t.pair.image);
    }
}
