use std::ffi::{CStr, CString};
use std::ptr;

use heightformer_ffi::*;

const MICRO: &str = "model.bins = 4
model.h_min = 0
model.h_max = 40
encoder.stem_width = 8
encoder.stage_widths = 8,16,32
encoder.blocks_per_stage = 1,1,1
encoder.norm_groups = 4
encoder.embed_dim = 8
encoder.depths = 2,2,2
encoder.heads = 1,2,4
encoder.window = 4
encoder.coupling_reduction = 4
decoder.query_dim = 8
decoder.heads = 2
decoder.token_cap = 16
decoder.conv_groups = 1,1,1
";

fn last_error() -> String {
    unsafe { CStr::from_ptr(hf_last_error_message()) }.to_string_lossy().into_owned()
}

fn micro_model() -> *mut HfModel {
    let cfg = CString::new(MICRO).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { hf_model_new(cfg.as_ptr(), 0, &mut m) }, HfStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(hf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_lifecycle_and_prediction() {
    let m = micro_model();
    let mut n = 0u64;
    assert_eq!(unsafe { hf_model_parameter_count(m, &mut n) }, HfStatus::Ok);
    assert!(n > 0);
    let (mut lo, mut hi) = (0.0, 0.0);
    assert_eq!(unsafe { hf_model_height_range(m, &mut lo, &mut hi) }, HfStatus::Ok);
    assert_eq!((lo, hi), (0.0, 40.0));
    let rgb = vec![0.4f32; 64 * 80 * 3];
    let mut out = vec![f32::NAN; 64 * 80];
    let s = unsafe { hf_model_predict(m, rgb.as_ptr(), 64, 80, 64, 16, out.as_mut_ptr()) };
    assert_eq!(s, HfStatus::Ok, "{}", last_error());
    assert!(out.iter().all(|h| (0.0..=40.0).contains(h)));
    unsafe { hf_model_free(m) };
    unsafe { hf_model_free(ptr::null_mut()) };
}

#[test]
fn bad_tile_size_is_invalid_argument() {
    let m = micro_model();
    let rgb = vec![0.4f32; 64 * 64 * 3];
    let mut out = vec![0.0f32; 64 * 64];
    let s = unsafe { hf_model_predict(m, rgb.as_ptr(), 64, 64, 48, 0, out.as_mut_ptr()) };
    assert_eq!(s, HfStatus::InvalidArgument);
    assert!(last_error().contains("48"));
    unsafe { hf_model_free(m) };
}

#[test]
fn load_missing_checkpoint_names_path() {
    let path = CString::new("/nonexistent/model.safetensors").unwrap();
    let mut m = ptr::null_mut();
    let s = unsafe { hf_model_load(path.as_ptr(), &mut m) };
    assert_ne!(s, HfStatus::Ok);
    assert!(m.is_null());
    assert!(last_error().contains("/nonexistent/model.safetensors"), "{}", last_error());
}

#[test]
fn unknown_config_key_rejected() {
    let cfg = CString::new("decoder.nope = 1").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { hf_model_new(cfg.as_ptr(), 0, &mut m) }, HfStatus::InvalidArgument);
    assert!(last_error().contains("decoder.nope"));
}

#[test]
fn null_pointers_reported() {
    let mut out = 0u64;
    assert_eq!(unsafe { hf_model_parameter_count(ptr::null(), &mut out) }, HfStatus::NullPointer);
    assert!(last_error().contains("model"));
    assert_eq!(unsafe { hf_attention_cost(1, 1, 1, 1, ptr::null_mut(), &mut out) }, HfStatus::NullPointer);
}

#[test]
fn metrics_hand_examples() {
    let mut m = HfMetrics::default();
    let pred = [1.5f32, 0.5];
    let gt = [1.0f32, 1.0];
    // h_min = 0 with zero offset compares the raw heights
    assert_eq!(unsafe { hf_metrics_evaluate(pred.as_ptr(), gt.as_ptr(), ptr::null(), 2, 0.0, 0.0, &mut m) }, HfStatus::Ok);
    assert_eq!(m.rel, 0.5);
    assert_eq!(m.valid_pixels, 2);
    let (p, g) = ([1.3f32], [1.0f32]);
    assert_eq!(unsafe { hf_metrics_evaluate(p.as_ptr(), g.as_ptr(), ptr::null(), 1, 0.0, 0.0, &mut m) }, HfStatus::Ok);
    assert_eq!((m.delta1, m.delta2), (0.0, 1.0));
    let mask = [0u8];
    let s = unsafe { hf_metrics_evaluate(p.as_ptr(), g.as_ptr(), mask.as_ptr(), 1, 0.0, 0.0, &mut m) };
    assert_eq!(s, HfStatus::Data);
}

#[test]
fn silog_closed_form() {
    let gt = [1.0, 2.0, 5.0, 7.5];
    let pred: Vec<f64> = gt.iter().map(|g| 2.0 * g).collect();
    let mut loss = f64::NAN;
    let s = unsafe { hf_silog_loss(pred.as_ptr(), gt.as_ptr(), ptr::null(), 4, 10.0, 0.85, &mut loss) };
    assert_eq!(s, HfStatus::Ok);
    assert!((loss - 10.0 * 2f64.ln() * 0.15f64.sqrt()).abs() < 1e-9);
    let bad = [-1.0, 2.0, 5.0, 7.5];
    assert_eq!(unsafe { hf_silog_loss(bad.as_ptr(), gt.as_ptr(), ptr::null(), 4, 10.0, 0.85, &mut loss) }, HfStatus::Data);
}

#[test]
fn normalize_and_cost() {
    let dsm = [-5.0f32, 7.5, 20.0, f32::NAN];
    let mut out = [0.0f32; 4];
    assert_eq!(unsafe { hf_normalize_heights(dsm.as_ptr(), 4, -5.0, 20.0, out.as_mut_ptr()) }, HfStatus::Ok);
    assert_eq!(&out[..3], &[0.0, 0.5, 1.0]);
    assert!(out[3].is_nan());
    assert_eq!(unsafe { hf_normalize_heights(dsm.as_ptr(), 4, 3.0, 3.0, out.as_mut_ptr()) }, HfStatus::InvalidArgument);
    let (mut g, mut w) = (0, 0);
    assert_eq!(unsafe { hf_attention_cost(56, 56, 96, 7, &mut g, &mut w) }, HfStatus::Ok);
    assert_eq!((g, w), (2_003_828_736, 145_108_992));
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/heightformer.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["hf_model_load", "hf_model_free", "hf_model_predict", "hf_metrics_evaluate", "hf_last_error_message", "HF_STATUS_OK"] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
