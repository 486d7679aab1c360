//! On-disk layout: `<root>/images/<stem>.png` and `<root>/dsm/<stem>.f32`
//! (raw little-endian floats plus a `<stem>.hdr` text header
//! `rows cols resolution h_min h_max`) or `<root>/dsm/<stem>.tif`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use super::{ScenePair, TilePair};
use crate::error::{Error, Result};
use crate::height::HeightRange;

pub const DEFAULT_SENTINEL: f32 = -9999.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsmHeader {
    pub rows: usize,
    pub cols: usize,
    pub resolution: f64,
    pub range: HeightRange,
}

impl DsmHeader {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let f: Vec<&str> = text.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::decode(path, format!("expected `rows cols resolution h_min h_max`, got {} fields", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::decode(path, format!("`{s}`: {e}")));
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::decode(path, format!("`{s}`: {e}")));
        Ok(Self {
            rows: int(f[0])?,
            cols: int(f[1])?,
            resolution: num(f[2])?,
            range: HeightRange::new(num(f[3])?, num(f[4])?)?,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} {} {} {} {}\n",
            self.rows, self.cols, self.resolution, self.range.min, self.range.max
        )
    }
}

fn header_path(dsm: &Path) -> PathBuf {
    dsm.with_extension("hdr")
}

pub fn write_dsm_f32(path: &Path, dsm: &[f32], header: &DsmHeader) -> Result<()> {
    if dsm.len() != header.rows * header.cols {
        return Err(Error::DimensionMismatch(format!(
            "{} heights for a {}×{} header",
            dsm.len(),
            header.rows,
            header.cols
        )));
    }
    let bytes: Vec<u8> = dsm.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let hp = header_path(path);
    fs::write(&hp, header.to_text()).map_err(|e| Error::io(&hp, e))
}

pub fn read_dsm_f32(path: &Path) -> Result<(DsmHeader, Vec<f32>)> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header = DsmHeader::parse(&text, &hp)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * header.rows * header.cols {
        return Err(Error::decode(
            path,
            format!("{} bytes for a {}×{} raster", bytes.len(), header.rows, header.cols),
        ));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((header, data))
}

/// Single-band TIFF as `(rows, cols, heights)`.
pub fn read_dsm_tiff(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    use tiff::decoder::{Decoder, DecodingResult};
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| Error::decode(path, e))?;
    let (w, h) = dec.dimensions().map_err(|e| Error::decode(path, e))?;
    let img = dec.read_image().map_err(|e| Error::decode(path, e))?;
    let data: Vec<f32> = match img {
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => return Err(Error::decode(path, "unsupported TIFF sample format")),
    };
    let (rows, cols) = (h as usize, w as usize);
    if data.len() != rows * cols {
        return Err(Error::decode(path, "expected a single-band raster"));
    }
    Ok((rows, cols, data))
}

/// Any supported DSM file; the header is present for `.f32` rasters.
pub fn read_dsm(path: &Path) -> Result<(usize, usize, Vec<f32>, Option<DsmHeader>)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tif") | Some("tiff") => {
            let (r, c, d) = read_dsm_tiff(path)?;
            Ok((r, c, d, None))
        }
        _ => {
            let (h, d) = read_dsm_f32(path)?;
            Ok((h.rows, h.cols, d, Some(h)))
        }
    }
}

/// PNG as unit-scaled RGB `(rows, cols, values)`; grey and alpha inputs are
/// expanded or dropped.
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    use png::{ColorType, Transformations};
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(Transformations::EXPAND | Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::decode(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::decode(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::decode(path, e))?;
    let (rows, cols) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::decode(path, "palette was not expanded")),
    };
    let mut out = Vec::with_capacity(rows * cols * 3);
    for r in 0..rows {
        let line = &buf[r * info.line_size..r * info.line_size + cols * channels];
        for px in line.chunks_exact(channels) {
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            out.extend(rgb.iter().map(|&v| v as f32 / 255.0));
        }
    }
    Ok((rows, cols, out))
}

pub fn write_png_rgb(path: &Path, rows: usize, cols: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != rows * cols * 3 {
        return Err(Error::DimensionMismatch(format!("{} bytes for a {rows}×{cols} RGB image", rgb.len())));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::decode(path, e))?;
    w.write_image_data(rgb).map_err(|e| Error::decode(path, e))?;
    w.finish().map_err(|e| Error::decode(path, e))
}

fn unit_to_u8(v: &[f32]) -> Vec<u8> {
    v.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Write `pair` under `root` using the standard layout.
pub fn write_scene(root: &Path, stem: &str, pair: &ScenePair) -> Result<()> {
    for sub in ["images", "dsm"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_png_rgb(&root.join("images").join(format!("{stem}.png")), pair.rows, pair.cols, &unit_to_u8(&pair.image))?;
    let dsm: Vec<f32> = pair
        .dsm
        .iter()
        .zip(&pair.mask)
        .map(|(&d, &m)| if m { d } else { DEFAULT_SENTINEL })
        .collect();
    let header = DsmHeader {
        rows: pair.rows,
        cols: pair.cols,
        resolution: pair.resolution,
        range: pair.range,
    };
    write_dsm_f32(&root.join("dsm").join(format!("{stem}.f32")), &dsm, &header)
}

/// Load a co-registered pair. Non-finite heights and `sentinel` are masked
/// out. The height range comes from `range` if given, else from the `.hdr`
/// header, else from the valid data.
pub fn load_tile_pair(image_path: &Path, dsm_path: &Path, sentinel: f32, range: Option<HeightRange>) -> Result<TilePair> {
    let (rows, cols, image) = read_png_rgb(image_path)?;
    let (dr, dc, mut dsm, header) = read_dsm(dsm_path)?;
    if (rows, cols) != (dr, dc) {
        return Err(Error::DimensionMismatch(format!(
            "{} is {rows}×{cols} but {} is {dr}×{dc}",
            image_path.display(),
            dsm_path.display()
        )));
    }
    let mask: Vec<bool> = dsm.iter().map(|&d| d.is_finite() && d != sentinel).collect();
    let valid: Vec<f32> = dsm.iter().zip(&mask).filter(|(_, &m)| m).map(|(&d, _)| d).collect();
    if valid.is_empty() {
        return Err(Error::Data(format!("{} has no valid heights", dsm_path.display())));
    }
    for (d, &m) in dsm.iter_mut().zip(&mask) {
        if !m {
            *d = f32::NAN;
        }
    }
    let range = match (range, header) {
        (Some(r), _) => r,
        (None, Some(h)) => h.range,
        (None, None) => {
            let lo = valid.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let hi = valid.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            HeightRange::new(lo, if hi > lo { hi } else { lo + 1.0 })?
        }
    };
    let pair = ScenePair {
        rows,
        cols,
        image,
        dsm,
        mask,
        range,
        resolution: header.map(|h| h.resolution).unwrap_or(1.0),
    };
    pair.validate()?;
    let name = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("tile").to_string();
    Ok(TilePair::from_scene(name, pair))
}

/// `(stem, image, dsm)` triples under `root`. Stems present on only one side
/// are reported together in the error.
pub fn list_pairs(root: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let stems = |dir: &Path, exts: &[&str]| -> Result<Vec<(String, PathBuf)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
            if exts.contains(&ext) {
                if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                    out.push((s.to_string(), p.clone()));
                }
            }
        }
        out.sort();
        Ok(out)
    };
    let images = stems(&root.join("images"), &["png"])?;
    let dsms = stems(&root.join("dsm"), &["f32", "tif", "tiff"])?;
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (s, ip) in &images {
        match dsms.iter().find(|(d, _)| d == s) {
            Some((_, dp)) => pairs.push((s.clone(), ip.clone(), dp.clone())),
            None => unmatched.push(s.clone()),
        }
    }
    for (s, _) in &dsms {
        if !images.iter().any(|(i, _)| i == s) {
            unmatched.push(s.clone());
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::Data(format!("unmatched stems under {}: {}", root.display(), unmatched.join(", "))));
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no image/DSM pairs under {}", root.display())));
    }
    Ok(pairs)
}

pub fn load_dataset(root: &Path, sentinel: f32, range: Option<HeightRange>) -> Result<Vec<TilePair>> {
    list_pairs(root)?
        .iter()
        .map(|(_, ip, dp)| load_tile_pair(ip, dp, sentinel, range))
        .collect()
}
