//! Image/DSM pairs: tiling, augmentation, synthesis and raster I/O.

mod augment;
mod io;
mod synth;

pub use augment::{augment, apply_ops, rotate_pair, AugmentConfig, AugmentOps};
pub use io::{
    list_pairs, load_dataset, load_tile_pair, read_dsm, read_dsm_f32, read_dsm_tiff, read_png_rgb, write_dsm_f32,
    write_png_rgb, write_scene, DsmHeader, DEFAULT_SENTINEL,
};
pub use synth::{synth_scene, SynthSpec};

use crate::error::{Error, Result};
use crate::height::HeightRange;

/// Co-registered color image, DSM and valid-pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols × 3`, unit-scaled.
    pub image: Vec<f32>,
    /// Heights in meters, row-major.
    pub dsm: Vec<f32>,
    pub mask: Vec<bool>,
    pub range: HeightRange,
    /// Meters per pixel.
    pub resolution: f64,
}

impl ScenePair {
    pub fn validate(&self) -> Result<()> {
        let n = self.rows * self.cols;
        if self.image.len() != 3 * n || self.dsm.len() != n || self.mask.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{}×{} scene with {} image values, {} heights, {} mask entries",
                self.rows,
                self.cols,
                self.image.len(),
                self.dsm.len(),
                self.mask.len()
            )));
        }
        for (i, (&d, &m)) in self.dsm.iter().zip(&self.mask).enumerate() {
            if m && (!d.is_finite() || !self.range.contains(d as f64)) {
                return Err(Error::Data(format!(
                    "valid height {d} at pixel {i} lies outside [{}, {}]",
                    self.range.min, self.range.max
                )));
            }
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copy of the `h × w` window at `(row, col)`.
    pub fn window(&self, row: usize, col: usize, h: usize, w: usize) -> Result<ScenePair> {
        if row + h > self.rows || col + w > self.cols {
            return Err(Error::Shape(format!(
                "window {h}×{w} at ({row}, {col}) exceeds {}×{} scene",
                self.rows, self.cols
            )));
        }
        let mut out = ScenePair {
            rows: h,
            cols: w,
            image: Vec::with_capacity(h * w * 3),
            dsm: Vec::with_capacity(h * w),
            mask: Vec::with_capacity(h * w),
            range: self.range,
            resolution: self.resolution,
        };
        for r in row..row + h {
            let a = r * self.cols + col;
            out.image.extend_from_slice(&self.image[3 * a..3 * (a + w)]);
            out.dsm.extend_from_slice(&self.dsm[a..a + w]);
            out.mask.extend_from_slice(&self.mask[a..a + w]);
        }
        Ok(out)
    }

    /// Heights normalized into `[0, 1]` by the dataset range.
    pub fn normalized_dsm(&self) -> Vec<f32> {
        crate::height::normalize_heights(&self.dsm, self.range.min, self.range.max).unwrap_or_else(|_| self.dsm.clone())
    }
}

/// A fixed-size piece of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePair {
    pub name: String,
    pub pair: ScenePair,
    /// `(row, col)` of the tile in its parent scene.
    pub origin: (usize, usize),
}

impl TilePair {
    pub fn from_scene(name: impl Into<String>, pair: ScenePair) -> Self {
        Self {
            name: name.into(),
            pair,
            origin: (0, 0),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.pair.rows, self.pair.cols)
    }
}

/// Tile origins along one axis: a regular grid with the given stride whose
/// last tile is shifted inward to end exactly at `len`.
pub fn grid_origins(len: usize, tile: usize, stride: usize) -> Result<Vec<usize>> {
    if tile == 0 || stride == 0 {
        return Err(Error::Config("tile size and stride must be positive".into()));
    }
    if len < tile {
        return Err(Error::Shape(format!("extent {len} is smaller than tile {tile}")));
    }
    let mut out = Vec::new();
    let mut o = 0;
    while o + tile < len {
        out.push(o);
        o += stride;
    }
    out.push(len - tile);
    out.dedup();
    Ok(out)
}

/// Cut `scene` into `tile × tile` pieces on a stride-`tile` grid.
pub fn crop_grid(scene: &ScenePair, tile: usize, name: &str) -> Result<Vec<TilePair>> {
    let rows = grid_origins(scene.rows, tile, tile)?;
    let cols = grid_origins(scene.cols, tile, tile)?;
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push(TilePair {
                name: format!("{name}_r{r}_c{c}"),
                pair: scene.window(r, c, tile, tile)?,
                origin: (r, c),
            });
        }
    }
    Ok(out)
}
