use candle_core::{DType, Device, Tensor};

use crate::data::grid_origins;
use crate::error::{Error, Result};
use crate::model::HeightFormer;

/// Full-scene prediction assembled from overlapping tiles.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub rows: usize,
    pub cols: usize,
    /// Heights in meters, row-major.
    pub heights: Vec<f32>,
    /// Per-tile bin values in meters, in tile order.
    pub bins: Vec<Vec<f64>>,
    /// Tile origins `(row, col)` in the (possibly padded) scene.
    pub origins: Vec<(usize, usize)>,
}

/// Blending weights along one tile axis: linear ramps of length `overlap`
/// at both ends, 1 in the interior, never 0.
pub fn feather_weights(tile: usize, overlap: usize) -> Vec<f64> {
    let ramp = overlap.max(1) as f64;
    (0..tile)
        .map(|i| ((i + 1).min(tile - i) as f64).min(ramp) / ramp)
        .collect()
}

fn pad_edge(image: &[f32], rows: usize, cols: usize, pr: usize, pc: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(pr * pc * 3);
    for r in 0..pr {
        let sr = r.min(rows - 1);
        for c in 0..pc {
            let i = 3 * (sr * cols + c.min(cols - 1));
            out.extend_from_slice(&image[i..i + 3]);
        }
    }
    out
}

/// Tile `image` (`rows × cols × 3`, unit-scaled) with `tile`-sized windows
/// overlapping by `overlap` pixels, predict each, and blend overlaps with
/// feathering weights. Scenes smaller than a tile are edge-padded first.
pub fn predict_scene(model: &HeightFormer, image: &[f32], rows: usize, cols: usize, tile: usize, overlap: usize) -> Result<Prediction> {
    if image.len() != rows * cols * 3 || rows == 0 || cols == 0 {
        return Err(Error::DimensionMismatch(format!("{} values for a {rows}×{cols} RGB scene", image.len())));
    }
    if tile % 32 != 0 || tile == 0 {
        return Err(Error::Config(format!("tile size {tile} must be a positive multiple of 32")));
    }
    if overlap >= tile {
        return Err(Error::Config(format!("overlap {overlap} must be smaller than tile {tile}")));
    }
    let (pr, pc) = (rows.max(tile), cols.max(tile));
    let padded;
    let src = if (pr, pc) != (rows, cols) {
        padded = pad_edge(image, rows, cols, pr, pc);
        &padded[..]
    } else {
        image
    };
    let stride = tile - overlap;
    let row_o = grid_origins(pr, tile, stride)?;
    let col_o = grid_origins(pc, tile, stride)?;
    let wt = feather_weights(tile, overlap);
    let range = model.config().range;
    let mode = model.config().decoder.bin_mode;
    let mut acc = vec![0.0f64; pr * pc];
    let mut wsum = vec![0.0f64; pr * pc];
    let mut bins = Vec::new();
    let mut origins = Vec::new();
    for &r0 in &row_o {
        for &c0 in &col_o {
            let mut buf = Vec::with_capacity(tile * tile * 3);
            for r in r0..r0 + tile {
                let a = 3 * (r * pc + c0);
                buf.extend_from_slice(&src[a..a + 3 * tile]);
            }
            let x = Tensor::from_vec(buf, (1, tile, tile, 3), &Device::Cpu)?.to_dtype(model.dtype())?;
            let out = model.forward(&x)?;
            let h: Vec<f64> = out.meters().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for r in 0..tile {
                for c in 0..tile {
                    let w = wt[r] * wt[c];
                    let i = (r0 + r) * pc + c0 + c;
                    acc[i] += w * h[r * tile + c];
                    wsum[i] += w;
                }
            }
            let values = out.decoder.bins.values(mode)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            bins.push(values.iter().map(|&v| range.rescale(v)).collect());
            origins.push((r0, c0));
        }
    }
    let mut heights = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * pc + c;
            heights.push((acc[i] / wsum[i]) as f32);
        }
    }
    Ok(Prediction {
        rows,
        cols,
        heights,
        bins,
        origins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feather_ramps() {
        assert_eq!(feather_weights(6, 0), vec![1.0; 6]);
        let w = feather_weights(8, 3);
        assert_eq!(w[0], 1.0 / 3.0);
        assert_eq!(w[2], 1.0);
        assert_eq!(w[7], 1.0 / 3.0);
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn edge_padding_repeats_border() {
        let img: Vec<f32> = (0..2 * 2 * 3).map(|v| v as f32).collect();
        let p = pad_edge(&img, 2, 2, 3, 3);
        assert_eq!(&p[3 * 2..3 * 3], &img[3..6]);
        assert_eq!(&p[3 * 8..], &img[9..12]);
    }
}
