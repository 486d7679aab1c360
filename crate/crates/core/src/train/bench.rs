use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::HeightFormer;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub rows: usize,
    pub cols: usize,
    pub warmup: usize,
    /// Per-forward wall time, milliseconds.
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub hardware: String,
    pub parameters: usize,
}

/// CPU model and thread count, as far as the OS reports them.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}, {threads} threads, cpu backend")
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Time `reps` forward passes on a fixed `rows × cols` input after `warmup`
/// untimed passes.
pub fn benchmark(model: &HeightFormer, rows: usize, cols: usize, reps: usize, warmup: usize) -> Result<BenchmarkReport> {
    if reps == 0 {
        return Err(Error::Config("benchmark needs at least one repetition".into()));
    }
    let x = Tensor::full(0.5f32, (1, rows, cols, 3), &Device::Cpu)?.to_dtype(model.dtype())?;
    for _ in 0..warmup {
        model.forward(&x)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        let out = model.forward(&x)?;
        // force the result so lazy work is counted
        out.meters().sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = percentile(&sorted, 0.5);
    Ok(BenchmarkReport {
        rows,
        cols,
        warmup,
        samples_ms: samples,
        median_ms: median,
        p95_ms: percentile(&sorted, 0.95),
        fps: 1e3 / median,
        hardware: hardware_descriptor(),
        parameters: model.count_parameters().total,
    })
}
