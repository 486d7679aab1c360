use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ScenePair;
use crate::error::{Error, Result};
use crate::height::HeightRange;
use crate::params::seeded_rng;

/// Procedural urban scene: flat ground, box buildings, blob tree canopies
/// and a few roads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub resolution: f64,
    pub range: HeightRange,
    pub ground_height: f64,
    pub buildings: usize,
    /// Building height above ground, meters.
    pub building_height: (f64, f64),
    /// Footprint side length, pixels.
    pub footprint: (usize, usize),
    pub trees: usize,
    pub tree_height: (f64, f64),
    /// Canopy radius, pixels.
    pub tree_radius: (usize, usize),
    /// Approximate share of the scene covered by roads.
    pub road_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rows: 256,
            cols: 256,
            resolution: 0.5,
            range: HeightRange { min: 0.0, max: 40.0 },
            ground_height: 2.0,
            buildings: 10,
            building_height: (4.0, 30.0),
            footprint: (12, 48),
            trees: 14,
            tree_height: (3.0, 12.0),
            tree_radius: (4, 12),
            road_fraction: 0.08,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Two height populations: ground and a narrow band of tall roofs.
    pub fn bimodal(rows: usize, cols: usize, seed: u64) -> Self {
        Self {
            rows,
            cols,
            ground_height: 2.0,
            buildings: (rows * cols / 2048).max(2),
            building_height: (24.0, 28.0),
            footprint: ((rows / 8).max(4), (rows / 3).max(6)),
            trees: 0,
            road_fraction: 0.05,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic scene: {m}")));
        if self.rows == 0 || self.cols == 0 || !(self.resolution > 0.0) {
            return bad("size and resolution must be positive");
        }
        let r = self.range;
        if !(r.max > r.min) {
            return bad("height range is empty");
        }
        if self.ground_height < r.min || self.ground_height > r.max {
            return bad("ground height lies outside the height range");
        }
        for (name, (lo, hi)) in [("building_height", self.building_height), ("tree_height", self.tree_height)] {
            if !(0.0 <= lo && lo <= hi) || self.ground_height + hi > r.max {
                return Err(Error::Config(format!(
                    "synthetic scene: {name} ({lo}, {hi}) must be non-negative and fit under h_max above the ground"
                )));
            }
        }
        if self.footprint.0 == 0 || self.footprint.0 > self.footprint.1 || self.tree_radius.0 == 0 || self.tree_radius.0 > self.tree_radius.1 {
            return bad("footprint and tree radius ranges need 0 < lo ≤ hi");
        }
        if !(0.0..=1.0).contains(&self.road_fraction) {
            return bad("road_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Class {
    Ground,
    Road,
    Roof,
    Tree,
}

/// Deterministic function of `spec` (including its seed).
pub fn synth_scene(spec: &SynthSpec) -> Result<ScenePair> {
    spec.validate()?;
    let (rows, cols) = (spec.rows, spec.cols);
    let n = rows * cols;
    let mut rng = seeded_rng(spec.seed);
    let ground = spec.ground_height as f32;
    let mut dsm = vec![ground; n];
    let mut class = vec![Class::Ground; n];
    // per-pixel roof tint, so neighbouring buildings stay distinguishable
    let mut tint = vec![0.0f32; n];

    let road_w = ((rows.min(cols) as f64 * 0.04).round() as usize).max(2);
    let mut covered = 0usize;
    let target = (spec.road_fraction * n as f64) as usize;
    while covered < target {
        let vertical = rng.random::<bool>();
        let (len, other) = if vertical { (cols, rows) } else { (rows, cols) };
        let at = rng.random_range(0..len.saturating_sub(road_w).max(1));
        for a in at..(at + road_w).min(len) {
            for b in 0..other {
                let i = if vertical { b * cols + a } else { a * cols + b };
                if class[i] != Class::Road {
                    class[i] = Class::Road;
                    covered += 1;
                }
            }
        }
    }

    for _ in 0..spec.buildings {
        let h = rng.random_range(spec.building_height.0..=spec.building_height.1) as f32;
        let fh = rng.random_range(spec.footprint.0..=spec.footprint.1).min(rows);
        let fw = rng.random_range(spec.footprint.0..=spec.footprint.1).min(cols);
        let r0 = rng.random_range(0..=rows - fh);
        let c0 = rng.random_range(0..=cols - fw);
        let t = rng.random_range(-0.08f32..0.08);
        for r in r0..r0 + fh {
            for c in c0..c0 + fw {
                let i = r * cols + c;
                if ground + h >= dsm[i] {
                    dsm[i] = ground + h;
                    class[i] = Class::Roof;
                    tint[i] = t;
                }
            }
        }
    }

    for _ in 0..spec.trees {
        let h = rng.random_range(spec.tree_height.0..=spec.tree_height.1) as f32;
        let rad = rng.random_range(spec.tree_radius.0..=spec.tree_radius.1) as f32;
        let cy = rng.random_range(0..rows) as f32;
        let cx = rng.random_range(0..cols) as f32;
        let reach = rad.ceil() as isize;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (r, c) = (cy as isize + dr, cx as isize + dc);
                if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                    continue;
                }
                let d2 = (dr * dr + dc * dc) as f32 / (rad * rad);
                if d2 > 1.0 {
                    continue;
                }
                let canopy = ground + h * (1.0 - d2).sqrt();
                let i = r as usize * cols + c as usize;
                if canopy > dsm[i] {
                    dsm[i] = canopy;
                    class[i] = Class::Tree;
                }
            }
        }
    }

    let span = (spec.range.max - spec.range.min) as f32;
    let mut image = Vec::with_capacity(3 * n);
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        let noise = rng.random_range(-0.03f32..0.03);
        let rel = ((dsm[i] - ground) / span).clamp(0.0, 1.0);
        let px = match class[i] {
            Class::Ground => {
                let grain = 0.03 * (((r * 7 + c * 13) % 11) as f32 / 11.0);
                [0.42 + grain, 0.50 + grain, 0.30]
            }
            Class::Road => [0.30, 0.30, 0.32],
            Class::Roof => {
                let s = 0.35 + 0.6 * rel;
                [s + tint[i], 0.75 * s, 0.65 * s - tint[i]]
            }
            Class::Tree => {
                let s = 0.3 + 0.9 * rel;
                [0.12 * s, 0.55 * s, 0.15 * s]
            }
        };
        image.extend(px.iter().map(|v| (v + noise).clamp(0.0, 1.0)));
    }

    let pair = ScenePair {
        rows,
        cols,
        image,
        dsm,
        mask: vec![true; n],
        range: spec.range,
        resolution: spec.resolution,
    };
    pair.validate()?;
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let s = SynthSpec { rows: 64, cols: 64, seed: 11, ..SynthSpec::default() };
        assert_eq!(synth_scene(&s).unwrap(), synth_scene(&s).unwrap());
        let other = SynthSpec { seed: 12, ..s.clone() };
        assert_ne!(synth_scene(&s).unwrap().dsm, synth_scene(&other).unwrap().dsm);
    }

    #[test]
    fn empty_scene_is_flat() {
        let s = SynthSpec { rows: 32, cols: 40, buildings: 0, trees: 0, ground_height: 3.5, ..SynthSpec::default() };
        let p = synth_scene(&s).unwrap();
        assert!(p.dsm.iter().all(|&h| h == 3.5));
    }

    #[test]
    fn single_building_peaks_on_its_footprint() {
        let s = SynthSpec {
            rows: 64,
            cols: 64,
            buildings: 1,
            trees: 0,
            ground_height: 0.0,
            building_height: (10.0, 10.0),
            footprint: (10, 10),
            road_fraction: 0.0,
            ..SynthSpec::default()
        };
        let p = synth_scene(&s).unwrap();
        let max = p.dsm.iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(max, 10.0);
        assert_eq!(p.dsm.iter().filter(|&&h| h == 10.0).count(), 100);
        assert!(p.dsm.iter().all(|&h| h == 0.0 || h == 10.0));
    }

    #[test]
    fn heights_stay_in_range() {
        for seed in 0..5 {
            let s = SynthSpec { rows: 96, cols: 80, seed, ..SynthSpec::default() };
            let p = synth_scene(&s).unwrap();
            assert!(p.dsm.iter().all(|&h| s.range.contains(h as f64)));
        }
    }

    #[test]
    fn tall_buildings_rejected() {
        let s = SynthSpec { building_height: (10.0, 50.0), ..SynthSpec::default() };
        assert!(synth_scene(&s).is_err());
    }
}
