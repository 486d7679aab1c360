//! C ABI over the `heightformer` library.
//!
//! Every function returns an [`HfStatus`]; on failure the message is kept per
//! thread and readable through [`hf_last_error_message`]. Models are opaque
//! handles created by [`hf_model_load`] or [`hf_model_new`] and released with
//! [`hf_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use heightformer::config::RunConfig;
use heightformer::encoder::attention_cost;
use heightformer::height::normalize_heights;
use heightformer::metrics::{evaluate, MetricsConfig, TileView};
use heightformer::objectives::{silog_loss, LossConfig};
use heightformer::train::{load_model, predict_scene};
use heightformer::{Error, HeightFormer};

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Numeric = 5,
    Checkpoint = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct HfModel {
    model: HeightFormer,
}

/// Pooled metric values. `rmse_log_literal` is the RMSE in meters.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HfMetrics {
    pub rel: f64,
    pub rmse_log: f64,
    pub rmse_log_literal: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixels: u64,
    pub excluded_pixels: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(HfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_)
            | Error::UnknownKey(_)
            | Error::DegenerateRange { .. }
            | Error::Shape(_)
            | Error::DimensionMismatch(_) => HfStatus::InvalidArgument,
            Error::Io { .. } => HfStatus::Io,
            Error::Data(_) | Error::Decode { .. } | Error::EmptyMask | Error::NonPositive { .. } => HfStatus::Data,
            Error::NonFinite(_) | Error::Tensor(_) => HfStatus::Numeric,
            Error::Checkpoint(_) => HfStatus::Checkpoint,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            HfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("panic: {msg}"));
            HfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(HfStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HfStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

/// Mask bytes: null means every pixel is valid, otherwise nonzero is valid.
unsafe fn mask_vec(ptr: *const u8, len: usize) -> Result<Vec<bool>, Failure> {
    if ptr.is_null() {
        return Ok(vec![true; len]);
    }
    Ok(slice(ptr, len, "mask")?.iter().map(|&m| m != 0).collect())
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn hf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a model checkpoint from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hf_model_load(path: *const c_char, out: *mut *mut HfModel) -> HfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let path = c_str(path, "path")?;
        let (model, _) = load_model(Path::new(path))?;
        *out = Box::into_raw(Box::new(HfModel { model }));
        Ok(())
    })
}

/// Build a freshly initialised model from `key = value` config text (may be
/// null for all defaults).
///
/// # Safety
/// `config_text` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hf_model_new(config_text: *const c_char, seed: u64, out: *mut *mut HfModel) -> HfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        let mut cfg = RunConfig::default();
        if !config_text.is_null() {
            cfg.apply_text(c_str(config_text, "config_text")?)?;
        }
        cfg.model.validate()?;
        let model = HeightFormer::new(&cfg.model, seed, heightformer::DType::F32)?;
        *out = Box::into_raw(Box::new(HfModel { model }));
        Ok(())
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hf_model_free(model: *mut HfModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Exact trainable-parameter count.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hf_model_parameter_count(model: *const HfModel, out: *mut u64) -> HfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_ref(out, "out")? = m.model.count_parameters().total as u64;
        Ok(())
    })
}

/// Height range in meters the model regresses into.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hf_model_height_range(model: *const HfModel, h_min: *mut f64, h_max: *mut f64) -> HfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let r = m.model.config().range;
        *out_ref(h_min, "h_min")? = r.min;
        *out_ref(h_max, "h_max")? = r.max;
        Ok(())
    })
}

/// Predict a `rows × cols` height map in meters from interleaved RGB values
/// scaled to `[0, 1]`, tiling with `tile`-sized windows overlapping by
/// `overlap` pixels. `heights` receives `rows * cols` values.
///
/// # Safety
/// `rgb` must hold `rows * cols * 3` floats and `heights` `rows * cols`.
#[no_mangle]
pub unsafe extern "C" fn hf_model_predict(
    model: *const HfModel,
    rgb: *const f32,
    rows: usize,
    cols: usize,
    tile: usize,
    overlap: usize,
    heights: *mut f32,
) -> HfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("rows * cols overflows"))?;
        if n == 0 {
            return Err(invalid("empty image"));
        }
        let img = slice(rgb, n * 3, "rgb")?;
        let out = slice_mut(heights, n, "heights")?;
        let p = predict_scene(&m.model, img, rows, cols, tile, overlap)?;
        out.copy_from_slice(&p.heights);
        Ok(())
    })
}

/// Map heights in meters to `[0, 1]` over `[h_min, h_max]`. NaN inputs stay NaN.
///
/// # Safety
/// `dsm` and `out` must each hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn hf_normalize_heights(dsm: *const f32, len: usize, h_min: f64, h_max: f64, out: *mut f32) -> HfStatus {
    guard(|| {
        let src = slice(dsm, len, "dsm")?;
        let dst = slice_mut(out, len, "out")?;
        dst.copy_from_slice(&normalize_heights(src, h_min, h_max)?);
        Ok(())
    })
}

/// Pooled metrics over `len` pixels. Heights are shifted so `h_min` lands at
/// `offset_m` before ratios and logs are taken. `mask` may be null.
///
/// # Safety
/// `pred` and `gt` must hold `len` floats, `mask` null or `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hf_metrics_evaluate(
    pred: *const f32,
    gt: *const f32,
    mask: *const u8,
    len: usize,
    h_min: f64,
    offset_m: f64,
    out: *mut HfMetrics,
) -> HfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let p: Vec<f64> = slice(pred, len, "pred")?.iter().map(|&v| v as f64).collect();
        let g: Vec<f64> = slice(gt, len, "gt")?.iter().map(|&v| v as f64).collect();
        let m = mask_vec(mask, len)?;
        let cfg = MetricsConfig {
            h_min,
            offset_m,
            ..MetricsConfig::default()
        };
        let view = TileView {
            name: "input",
            pred: &p,
            gt: &g,
            mask: &m,
        };
        let v = evaluate(&[view], &cfg)?.pooled;
        *out = HfMetrics {
            rel: v.rel,
            rmse_log: v.rmse_log,
            rmse_log_literal: v.rmse_log_literal,
            delta1: v.delta1,
            delta2: v.delta2,
            delta3: v.delta3,
            valid_pixels: v.valid_pixels,
            excluded_pixels: v.excluded_pixels,
        };
        Ok(())
    })
}

/// Scale-invariant log loss over valid pixels of strictly positive heights.
///
/// # Safety
/// `pred` and `gt` must hold `len` doubles, `mask` null or `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hf_silog_loss(
    pred: *const f64,
    gt: *const f64,
    mask: *const u8,
    len: usize,
    alpha: f64,
    lambda: f64,
    out: *mut f64,
) -> HfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let p = slice(pred, len, "pred")?;
        let g = slice(gt, len, "gt")?;
        let m = mask_vec(mask, len)?;
        *out = silog_loss(p, g, &m, &LossConfig { alpha, lambda })?;
        Ok(())
    })
}

/// Multiply-accumulate counts of global and `m × m` windowed self-attention
/// over an `h × w × c` map.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hf_attention_cost(h: u64, w: u64, c: u64, m: u64, global: *mut u64, windowed: *mut u64) -> HfStatus {
    guard(|| {
        let global = out_ref(global, "global")?;
        let windowed = out_ref(windowed, "windowed")?;
        (*global, *windowed) = attention_cost(h, w, c, m);
        Ok(())
    })
}
