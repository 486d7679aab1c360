//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use heightformer::decoder::{
    height_regression, BinMode, BinSet, Decoder, DecoderConfig, ProbabilityVolume, TransformerBlock,
};
use heightformer::encoder::{CouplingGate, FeatureCoupling, FeatureMap, SwinBlockPair};
use heightformer::objectives::{silog_loss_tensor, LossConfig};
use heightformer::params::{seeded_rng, ParamBuilder, ParamStore};
use heightformer::HeightRange;
use rand::Rng;

pub const F64: DType = DType::F64;

pub fn cpu() -> Device {
    Device::Cpu
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &cpu()).unwrap()
}

pub fn var(shape: &[usize], seed: u64) -> Var {
    Var::from_tensor(&randn(shape, seed)).unwrap()
}

/// Largest relative error between analytic and central-difference
/// gradients, over a sample of coordinates of every variable. Coordinates
/// whose gradient is tiny next to the largest one in the check (a key bias
/// under softmax has an exact zero) are measured against `FLOOR` times that
/// largest magnitude, since roundoff in the difference quotient is absolute.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
}

pub const FLOOR: f64 = 1e-3;

pub fn grad_check(vars: &[&Var], loss: impl Fn() -> Tensor, per_tensor: usize) -> GradReport {
    let h = 1e-6;
    let grads = loss().backward().unwrap();
    let eval = || loss().to_scalar::<f64>().unwrap();
    let all: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; v.elem_count()],
        })
        .collect();
    let scale = all.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (FLOOR * scale).max(1e-12);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (v, analytic) in vars.iter().zip(&all) {
        let base: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let shape = v.shape().clone();
        let n = base.len();
        let step = (n / per_tensor.max(1)).max(1);
        for i in (0..n).step_by(step).take(per_tensor) {
            let mut p = base.clone();
            p[i] += h;
            v.set(&Tensor::from_vec(p.clone(), &shape, &cpu()).unwrap()).unwrap();
            let up = eval();
            p[i] -= 2.0 * h;
            v.set(&Tensor::from_vec(p, &shape, &cpu()).unwrap()).unwrap();
            let down = eval();
            v.set(&Tensor::from_vec(base.clone(), &shape, &cpu()).unwrap()).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    GradReport { max_rel, checked }
}

fn store_vars(store: &ParamStore) -> Vec<Var> {
    store.iter().map(|(_, v)| v.clone()).collect()
}

/// Fixed random projection of `t` to a scalar, so every output coordinate
/// contributes to the checked gradient with a distinct weight.
pub fn project(t: &Tensor, seed: u64) -> Tensor {
    let w = randn(t.dims(), seed);
    (t * w).unwrap().sum_all().unwrap()
}

fn check_all(store: &ParamStore, inputs: &[&Var], loss: impl Fn() -> Tensor) -> GradReport {
    let params = store_vars(store);
    let mut all: Vec<&Var> = params.iter().collect();
    all.extend_from_slice(inputs);
    grad_check(&all, loss, 6)
}

pub fn check_coupling() -> GradReport {
    let mut store = ParamStore::new(F64, cpu());
    let mut rng = seeded_rng(1);
    let fc = FeatureCoupling::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 2, CouplingGate::Softmax).unwrap();
    let a = var(&[1, 3, 2, 4], 2);
    let b = var(&[1, 3, 2, 4], 3);
    check_all(&store, &[&a, &b], || {
        let fa = FeatureMap::new(a.as_tensor().clone(), 16).unwrap();
        let fb = FeatureMap::new(b.as_tensor().clone(), 16).unwrap();
        let (y, _) = fc.forward(&fa, &fb).unwrap();
        project(&y.data, 4)
    })
}

pub fn check_swin_pair() -> GradReport {
    let mut store = ParamStore::new(F64, cpu());
    let mut rng = seeded_rng(5);
    let pair = SwinBlockPair::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 2, 2, 2.0).unwrap();
    let z = var(&[1, 4, 4, 8], 6);
    check_all(&store, &[&z], || project(&pair.forward(z.as_tensor()).unwrap(), 7))
}

pub fn check_transformer_block() -> GradReport {
    let mut store = ParamStore::new(F64, cpu());
    let mut rng = seeded_rng(8);
    let block = TransformerBlock::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, 8, 2, 2, 4).unwrap();
    let q = var(&[1, 3, 8], 9);
    let f = var(&[1, 4, 4, 4], 10);
    check_all(&store, &[&q, &f], || project(&block.forward(q.as_tensor(), f.as_tensor()).unwrap(), 11))
}

pub fn check_height_regression(mode: BinMode) -> GradReport {
    let bins = var(&[2, 5], 12);
    let vol = var(&[2, 3, 3, 5], 13);
    let range = HeightRange::new(-2.0, 30.0).unwrap();
    grad_check(&[&bins, &vol], || {
        let b = BinSet {
            logits: bins.as_tensor().clone(),
            fixed: false,
        };
        let v = ProbabilityVolume {
            logits: vol.as_tensor().clone(),
            levels: vec![],
        };
        project(&height_regression(&b, &v, range, mode).unwrap().meters, 14)
    }, 10)
}

pub fn check_silog() -> GradReport {
    let mut rng = seeded_rng(15);
    let n = 24;
    let pv: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..20.0)).collect();
    let gv: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..20.0)).collect();
    let mv: Vec<f64> = (0..n).map(|i| if i % 5 == 3 { 0.0 } else { 1.0 }).collect();
    let pred = Var::from_tensor(&Tensor::from_vec(pv, (2, 3, 4), &cpu()).unwrap()).unwrap();
    let gt = Tensor::from_vec(gv, (2, 3, 4), &cpu()).unwrap();
    let mask = Tensor::from_vec(mv, (2, 3, 4), &cpu()).unwrap();
    grad_check(&[&pred], || silog_loss_tensor(pred.as_tensor(), &gt, &mask, &LossConfig::default()).unwrap(), n)
}

pub fn tiny_decoder_config(bins: usize) -> DecoderConfig {
    DecoderConfig {
        bins,
        query_dim: 4,
        heads: 2,
        ffn_ratio: 2,
        token_cap: 4,
        conv_groups: [1, 1, 1],
        ..DecoderConfig::default()
    }
}

pub fn check_decoder() -> GradReport {
    let mut store = ParamStore::new(F64, cpu());
    let mut rng = seeded_rng(16);
    let dec = Decoder::new(&mut ParamBuilder::new(&mut store, &mut rng), &tiny_decoder_config(4), 6).unwrap();
    let y = var(&[1, 2, 2, 6], 17);
    let range = HeightRange::new(0.0, 10.0).unwrap();
    check_all(&store, &[&y], || {
        let fm = FeatureMap::new(y.as_tensor().clone(), 16).unwrap();
        project(&dec.forward(&fm, range).unwrap().heights.meters, 18)
    })
}

/// Overwrite every parameter with uniform values in `[-scale, scale]`.
pub fn randomize(store: &ParamStore, seed: u64, scale: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for (i, n) in names.iter().enumerate() {
        let t = randn(store.get(n).unwrap().dims(), seed + i as u64);
        store.assign(n, &(t * scale).unwrap()).unwrap();
    }
}

fn host(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap_or_else(|| panic!("no parameter {name}")).as_tensor().flatten_all().unwrap().to_vec1().unwrap()
}

/// Plain-loop multi-head self-attention over all `t` tokens of `x` (`t × c`,
/// row-major), using the `{prefix}.qkv` / `{prefix}.proj` weights in `store`.
pub fn naive_global_attention(store: &ParamStore, prefix: &str, x: &[f64], t: usize, c: usize, heads: usize) -> Vec<f64> {
    let wq = host(store, &format!("{prefix}.qkv.weight"));
    let bq = host(store, &format!("{prefix}.qkv.bias"));
    let wp = host(store, &format!("{prefix}.proj.weight"));
    let bp = host(store, &format!("{prefix}.proj.bias"));
    let lin = |w: &[f64], b: &[f64], v: &[f64], out: usize, inp: usize| -> Vec<f64> {
        (0..out).map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * v[i]).sum::<f64>()).collect()
    };
    let qkv: Vec<Vec<f64>> = (0..t).map(|i| lin(&wq, &bq, &x[i * c..(i + 1) * c], 3 * c, c)).collect();
    let hd = c / heads;
    let mut merged = vec![vec![0.0; c]; t];
    for h in 0..heads {
        for i in 0..t {
            let q = &qkv[i][h * hd..(h + 1) * hd];
            let scores: Vec<f64> = (0..t)
                .map(|j| {
                    let k = &qkv[j][c + h * hd..c + (h + 1) * hd];
                    q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                let v = &qkv[j][2 * c + h * hd..2 * c + (h + 1) * hd];
                for d in 0..hd {
                    merged[i][h * hd + d] += e[j] / z * v[d];
                }
            }
        }
    }
    merged.iter().flat_map(|m| lin(&wp, &bp, m, c, c)).collect()
}

/// A very small model that trains in well under a second per step on 64×64 tiles.
pub const MICRO_CFG: &str = "\
model.bins = 4
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
train.epochs = 2
train.batch_size = 2
train.lr = 1e-3
train.augment = false
data.tile = 64
";

pub fn micro_config() -> heightformer::config::RunConfig {
    let mut c = heightformer::config::RunConfig::default();
    c.apply_text(MICRO_CFG).unwrap();
    c.validate().unwrap();
    c
}

pub fn synth_tiles(n: usize, size: usize, seed: u64) -> Vec<heightformer::data::TilePair> {
    use heightformer::data::{synth_scene, SynthSpec, TilePair};
    (0..n)
        .map(|i| {
            let spec = SynthSpec {
                rows: size,
                cols: size,
                buildings: 3,
                footprint: (size / 8, size / 3),
                trees: 3,
                tree_radius: (2, size / 10),
                seed: seed + i as u64,
                ..SynthSpec::default()
            };
            TilePair::from_scene(format!("t{i}"), synth_scene(&spec).unwrap())
        })
        .collect()
}
