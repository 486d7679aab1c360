use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dataset-level height range `[min, max]` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightRange {
    pub min: f64,
    pub max: f64,
}

impl HeightRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || max <= min {
            return Err(Error::DegenerateRange { h_min: min, h_max: max });
        }
        Ok(Self { min, max })
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }

    /// Meters → unit interval.
    pub fn normalize(&self, h: f64) -> f64 {
        (h - self.min) / self.span()
    }

    /// Unit interval → meters.
    pub fn rescale(&self, u: f64) -> f64 {
        self.min + self.span() * u
    }

    pub fn contains(&self, h: f64) -> bool {
        h >= self.min && h <= self.max
    }
}

/// Linear normalisation of a DSM into `[0, 1]` using a dataset-wide range.
/// Invalid (non-finite) pixels pass through unchanged.
pub fn normalize_heights(dsm: &[f32], h_min: f64, h_max: f64) -> Result<Vec<f32>> {
    let range = HeightRange::new(h_min, h_max)?;
    Ok(dsm
        .iter()
        .map(|&d| if d.is_finite() { range.normalize(d as f64) as f32 } else { d })
        .collect())
}

/// Inverse of [`normalize_heights`].
pub fn rescale_heights(unit: &[f32], h_min: f64, h_max: f64) -> Result<Vec<f32>> {
    let range = HeightRange::new(h_min, h_max)?;
    Ok(unit
        .iter()
        .map(|&u| if u.is_finite() { range.rescale(u as f64) as f32 } else { u })
        .collect())
}
