mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use heightformer::data::grid_origins;
use heightformer::train::{predict_scene, Checkpoint, Trainer};

fn probe(size: usize) -> Tensor {
    let v: Vec<f32> = (0..size * size * 3).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect();
    Tensor::from_vec(v, (1, size, size, 3), &Device::Cpu).unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = micro_config();
    let mut tr = Trainer::new(&cfg.model, &cfg.train, synth_tiles(2, 64, 0)).unwrap();
    tr.step().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    tr.checkpoint().unwrap().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.meta.step, 1);
    assert!(!loaded.optimizer.is_empty());
    let model = loaded.model().unwrap();
    let x = probe(64);
    assert_eq!(bits(&tr.model().forward(&x).unwrap().meters()), bits(&model.forward(&x).unwrap().meters()));
}

#[test]
fn same_seed_gives_identical_trace() {
    let cfg = micro_config();
    let run = || {
        let mut tr = Trainer::new(&cfg.model, &cfg.train, synth_tiles(4, 64, 3)).unwrap();
        (0..3).map(|_| tr.step().unwrap().loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_reproduces_next_step() {
    let mut cfg = micro_config();
    cfg.set("train.augment", "true").unwrap();
    cfg.set("augment.crop_size", "32").unwrap();
    let tiles = synth_tiles(4, 64, 7);
    let mut full = Trainer::new(&cfg.model, &cfg.train, tiles.clone()).unwrap();
    let trace: Vec<f64> = (0..3).map(|_| full.step().unwrap().loss).collect();

    let mut first = Trainer::new(&cfg.model, &cfg.train, tiles.clone()).unwrap();
    first.step().unwrap();
    first.step().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k2.safetensors");
    first.checkpoint().unwrap().save(&path).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::load(&path).unwrap(), &cfg.train, tiles).unwrap();
    assert_eq!(resumed.step_count(), 2);
    let next = resumed.step().unwrap();
    assert_eq!(next.step, 3);
    assert!((next.loss - trace[2]).abs() < 1e-6, "{} vs {}", next.loss, trace[2]);
}

#[test]
fn single_tile_scene_equals_forward() {
    let cfg = micro_config();
    let model = heightformer::HeightFormer::new(&cfg.model, 1, DType::F32).unwrap();
    let x = probe(64);
    let img: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
    let p = predict_scene(&model, &img, 64, 64, 64, 16).unwrap();
    let direct: Vec<f32> = model.forward(&x).unwrap().meters().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(p.origins, vec![(0, 0)]);
    assert_eq!(p.bins.len(), 1);
    assert_eq!(p.bins[0].len(), 4);
    for (a, b) in p.heights.iter().zip(&direct) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn scene_grid_is_edge_aligned() {
    assert_eq!(grid_origins(1024, 512, 448).unwrap(), vec![0, 448, 512]);
    let cfg = micro_config();
    let model = heightformer::HeightFormer::new(&cfg.model, 1, DType::F32).unwrap();
    let img = vec![0.5f32; 128 * 96 * 3];
    let p = predict_scene(&model, &img, 128, 96, 64, 16).unwrap();
    assert_eq!(p.origins.len(), 3 * 2);
    assert_eq!(p.heights.len(), 128 * 96);
    assert!(p.heights.iter().all(|h| h.is_finite()));
}

#[test]
fn small_scene_takes_padded_path() {
    let cfg = micro_config();
    let model = heightformer::HeightFormer::new(&cfg.model, 1, DType::F32).unwrap();
    let img = vec![0.3f32; 40 * 50 * 3];
    let p = predict_scene(&model, &img, 40, 50, 64, 8).unwrap();
    assert_eq!((p.rows, p.cols, p.heights.len()), (40, 50, 2000));
    assert_eq!(p.origins, vec![(0, 0)]);
}

#[test]
fn stitched_flat_scene_has_no_seams() {
    // Fit a constant 12 m scene under a faint texture (a perfectly uniform
    // image has zero variance in every norm layer), then stitch a 160×160
    // prediction from 64-pixel tiles.
    let mut cfg = micro_config();
    cfg.set("train.epochs", "60").unwrap();
    cfg.set("train.lr", "3e-3").unwrap();
    let tiles = flat_tiles(2, 64, 12.0);
    let mut tr = Trainer::new(&cfg.model, &cfg.train, tiles).unwrap();
    while !tr.is_done() {
        tr.step().unwrap();
    }
    let img = texture(160 * 160 * 3, 99);
    let p = predict_scene(tr.model(), &img, 160, 160, 64, 16).unwrap();
    let range = cfg.model.range.span() as f32;
    // tile edges fall at rows/cols 48, 64, 96, 112
    let seams = [47usize, 48, 63, 64, 95, 96, 111, 112];
    let on_seam = |i: usize| seams.contains(&i);
    let interior: Vec<f32> = (16..144)
        .flat_map(|r| (16..144).map(move |c| (r, c)))
        .filter(|&(r, c)| !on_seam(r) && !on_seam(c))
        .map(|(r, c)| p.heights[r * 160 + c])
        .collect();
    let mean = interior.iter().sum::<f32>() / interior.len() as f32;
    let spread = interior.iter().fold(0.0f32, |a, h| a.max((h - mean).abs()));
    let mut worst = 0.0f32;
    for &r in &seams {
        for c in 16..144 {
            worst = worst.max((p.heights[r * 160 + c] - mean).abs());
            worst = worst.max((p.heights[c * 160 + r] - mean).abs());
        }
    }
    assert!(
        worst < 1e-3 * range,
        "seam deviation {worst} m, interior mean {mean} m, interior spread {spread} m"
    );
}

fn texture(n: usize, seed: u64) -> Vec<f32> {
    use rand::Rng;
    let mut rng = heightformer::params::seeded_rng(seed);
    (0..n).map(|_| 0.5 + rng.random_range(-0.05f32..0.05)).collect()
}

fn flat_tiles(n: usize, size: usize, height: f32) -> Vec<heightformer::data::TilePair> {
    use heightformer::data::{ScenePair, TilePair};
    (0..n)
        .map(|i| {
            let pair = ScenePair {
                rows: size,
                cols: size,
                image: texture(size * size * 3, i as u64),
                dsm: vec![height; size * size],
                mask: vec![true; size * size],
                range: heightformer::HeightRange::new(0.0, 40.0).unwrap(),
                resolution: 1.0,
            };
            TilePair::from_scene(format!("flat{i}"), pair)
        })
        .collect()
}
