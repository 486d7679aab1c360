//! Height and error map renders with a labelled colorbar.

use std::path::Path;

use crate::data::write_png_rgb;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Colormap {
    /// Perceptually uniform sequential map for heights.
    Viridis,
    /// Blue–white–red, centred on zero.
    Diverging,
}

const VIRIDIS: [[f32; 3]; 9] = [
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.267, 0.749, 0.441],
    [0.993, 0.906, 0.144],
];

const DIVERGING: [[f32; 3]; 5] = [
    [0.020, 0.188, 0.380],
    [0.400, 0.655, 0.810],
    [0.969, 0.969, 0.969],
    [0.890, 0.420, 0.345],
    [0.404, 0.000, 0.122],
];

fn lerp_table(table: &[[f32; 3]], t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (table.len() - 1) as f32;
    let i = (t.floor() as usize).min(table.len() - 2);
    let f = t - i as f32;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let v = table[i][c] * (1.0 - f) + table[i + 1][c] * f;
        out[c] = (v * 255.0).round() as u8;
    }
    out
}

impl Colormap {
    /// Color for `t` in `[0, 1]`.
    pub fn color(self, t: f32) -> [u8; 3] {
        match self {
            Colormap::Viridis => lerp_table(&VIRIDIS, t),
            Colormap::Diverging => lerp_table(&DIVERGING, t),
        }
    }
}

const MASKED: [u8; 3] = [0, 0, 0];

/// Map values in `[lo, hi]` to colors; masked-out or non-finite pixels are black.
pub fn colorize(values: &[f32], mask: Option<&[bool]>, lo: f32, hi: f32, cmap: Colormap) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(values.len() * 3);
    for (i, &v) in values.iter().enumerate() {
        let valid = v.is_finite() && mask.is_none_or(|m| m[i]);
        out.extend_from_slice(&if valid { cmap.color((v - lo) / span) } else { MASKED });
    }
    out
}

// 3×5 glyphs, one row per nibble (bit 2 = left column)
const GLYPHS: [(char, [u8; 5]); 13] = [
    ('0', [7, 5, 5, 5, 7]),
    ('1', [2, 6, 2, 2, 7]),
    ('2', [7, 1, 7, 4, 7]),
    ('3', [7, 1, 7, 1, 7]),
    ('4', [5, 5, 7, 1, 1]),
    ('5', [7, 4, 7, 1, 7]),
    ('6', [7, 4, 7, 5, 7]),
    ('7', [7, 1, 1, 1, 1]),
    ('8', [7, 5, 7, 5, 7]),
    ('9', [7, 5, 7, 1, 7]),
    ('-', [0, 0, 7, 0, 0]),
    ('.', [0, 0, 0, 0, 2]),
    ('m', [0, 0, 7, 7, 5]),
];

fn draw_text(rgb: &mut [u8], width: usize, height: usize, x0: usize, y0: usize, text: &str, scale: usize) {
    let mut x = x0;
    for ch in text.chars() {
        if let Some((_, rows)) = GLYPHS.iter().find(|(c, _)| *c == ch) {
            for (gy, bits) in rows.iter().enumerate() {
                for gx in 0..3 {
                    if bits & (4 >> gx) == 0 {
                        continue;
                    }
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let (px, py) = (x + gx * scale + sx, y0 + gy * scale + sy);
                            if px < width && py < height {
                                let i = 3 * (py * width + px);
                                rgb[i..i + 3].copy_from_slice(&[255, 255, 255]);
                            }
                        }
                    }
                }
            }
        }
        x += 4 * scale;
    }
}

fn label(v: f32) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

/// A rendered map with a vertical colorbar and value labels to its right.
pub struct Rendered {
    pub rows: usize,
    pub cols: usize,
    pub rgb: Vec<u8>,
}

pub fn render_with_colorbar(values: &[f32], rows: usize, cols: usize, mask: Option<&[bool]>, lo: f32, hi: f32, cmap: Colormap) -> Result<Rendered> {
    if values.len() != rows * cols || mask.is_some_and(|m| m.len() != values.len()) {
        return Err(Error::DimensionMismatch(format!("{} values for a {rows}×{cols} render", values.len())));
    }
    let scale = (rows / 128).clamp(1, 4);
    let bar_w = 12 * scale;
    let text_w = 4 * scale * 7;
    let margin = 4 * scale;
    let out_cols = cols + margin + bar_w + margin + text_w;
    let out_rows = rows.max(48 * scale);
    let mut rgb = vec![32u8; out_rows * out_cols * 3];
    let img = colorize(values, mask, lo, hi, cmap);
    for r in 0..rows {
        let dst = 3 * r * out_cols;
        rgb[dst..dst + 3 * cols].copy_from_slice(&img[3 * r * cols..3 * (r + 1) * cols]);
    }
    let glyph_h = 5 * scale;
    let bar_top = glyph_h / 2;
    let bar_len = out_rows - glyph_h;
    let bx = cols + margin;
    for i in 0..bar_len {
        let t = 1.0 - i as f32 / (bar_len - 1).max(1) as f32;
        let c = cmap.color(t);
        for x in bx..bx + bar_w {
            let j = 3 * ((bar_top + i) * out_cols + x);
            rgb[j..j + 3].copy_from_slice(&c);
        }
    }
    let tx = bx + bar_w + margin;
    for k in 0..=4 {
        let t = k as f32 / 4.0;
        let y = bar_top + ((1.0 - t) * (bar_len - 1) as f32).round() as usize;
        for x in bx + bar_w..bx + bar_w + margin / 2 {
            let j = 3 * (y * out_cols + x);
            rgb[j..j + 3].copy_from_slice(&[255, 255, 255]);
        }
        let text = format!("{}m", label(lo + t * (hi - lo)));
        draw_text(&mut rgb, out_cols, out_rows, tx, y.saturating_sub(glyph_h / 2), &text, scale);
    }
    Ok(Rendered {
        rows: out_rows,
        cols: out_cols,
        rgb,
    })
}

/// Height map in meters rendered over `[lo, hi]`.
pub fn write_height_png(path: &Path, heights: &[f32], rows: usize, cols: usize, lo: f32, hi: f32) -> Result<()> {
    let r = render_with_colorbar(heights, rows, cols, None, lo, hi, Colormap::Viridis)?;
    write_png_rgb(path, r.rows, r.cols, &r.rgb)
}

/// Signed error `pred − gt` on a symmetric scale around zero.
pub fn write_error_png(path: &Path, pred: &[f32], gt: &[f32], mask: &[bool], rows: usize, cols: usize) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::DimensionMismatch("prediction, ground truth and mask differ in size".into()));
    }
    let err: Vec<f32> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
    let bound = err
        .iter()
        .zip(mask)
        .filter(|(e, &m)| m && e.is_finite())
        .fold(0.0f32, |a, (e, _)| a.max(e.abs()))
        .max(1e-3);
    let r = render_with_colorbar(&err, rows, cols, Some(mask), -bound, bound, Colormap::Diverging)?;
    write_png_rgb(path, r.rows, r.cols, &r.rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(Colormap::Viridis.color(0.0), [68, 1, 84]);
        assert_eq!(Colormap::Viridis.color(1.0), [253, 231, 37]);
        assert_eq!(Colormap::Diverging.color(0.5), [247, 247, 247]);
    }

    #[test]
    fn viridis_lightness_increases() {
        let lum = |c: [u8; 3]| 0.299 * c[0] as f32 + 0.587 * c[1] as f32 + 0.114 * c[2] as f32;
        let l: Vec<f32> = (0..=20).map(|i| lum(Colormap::Viridis.color(i as f32 / 20.0))).collect();
        assert!(l.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn masked_pixels_are_black() {
        let c = colorize(&[1.0, 2.0], Some(&[true, false]), 0.0, 2.0, Colormap::Viridis);
        assert_eq!(&c[3..], &[0, 0, 0]);
    }

    #[test]
    fn render_adds_colorbar() {
        let v = vec![0.5f32; 64 * 64];
        let r = render_with_colorbar(&v, 64, 64, None, 0.0, 1.0, Colormap::Viridis).unwrap();
        assert!(r.cols > 64);
        assert_eq!(r.rgb.len(), r.rows * r.cols * 3);
    }
}
