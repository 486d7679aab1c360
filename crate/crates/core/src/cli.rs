//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    crop_grid, list_pairs, load_tile_pair, read_png_rgb, synth_scene, write_dsm_f32, write_scene, DsmHeader,
    SynthSpec, TilePair,
};
use crate::decoder::BinSource;
use crate::error::{Error, Result};
use crate::height::HeightRange;
use crate::metrics::{evaluate, format_sig6, MetricsConfig, MetricsReport, TileView};
use crate::render::{write_error_png, write_height_png};
use crate::train::{benchmark, load_model, predict_scene, validate, Checkpoint, Trainer};

pub const CACHE_ENV: &str = "HEIGHTFORMER_CACHE";

#[derive(Parser, Debug)]
#[command(name = "heightformer", version, about = "Monocular height estimation from aerial images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic image/DSM dataset (train and val splits).
    MakeSynthetic(MakeSynthetic),
    /// Train a model from a config file.
    Train(Train),
    /// Compute metrics for predicted height maps against ground truth.
    Evaluate(Evaluate),
    /// Predict full-scene height maps with stitched tiles and write renders.
    Predict(Predict),
    /// Measure forward-pass latency and throughput.
    Benchmark(Benchmark),
    /// Train fixed and adaptive bin variants for several bin counts and compare.
    AblateBins(AblateBins),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct MakeSynthetic {
    /// Output root; defaults to `$HEIGHTFORMER_CACHE/synthetic`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    train_scenes: usize,
    #[arg(long, default_value_t = 2)]
    val_scenes: usize,
    /// Scene side length in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ground plus a narrow band of roof heights, no trees.
    #[arg(long)]
    bimodal: bool,
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for checkpoints, logs and the resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint that holds optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Evaluate {
    /// Directory of predicted DSMs (`<stem>.f32` directly or under `dsm/`).
    #[arg(long, required_unless_present = "checkpoint")]
    pred: Option<PathBuf>,
    /// Dataset root with `images/` and `dsm/`.
    #[arg(long)]
    gt: PathBuf,
    /// Predict with this checkpoint instead of reading `--pred`.
    #[arg(long, conflicts_with = "pred")]
    checkpoint: Option<PathBuf>,
    /// Meters above `h_min` that the lowest height is shifted to.
    #[arg(long, default_value_t = 1.0)]
    offset: f64,
    /// Dataset minimum height; defaults to the ground-truth header.
    #[arg(long)]
    h_min: Option<f64>,
    /// Write `metrics.json` and `metrics.txt` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Predict {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root with `images/` (and optionally `dsm/` for error maps).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    tile: usize,
    #[arg(long, default_value_t = 64)]
    overlap: usize,
}

#[derive(Args, Debug)]
struct Benchmark {
    /// Benchmark a trained checkpoint; otherwise a freshly initialised model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Square input side in pixels.
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateBins {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated bin counts.
    #[arg(long, value_delimiter = ',', default_value = "8,64")]
    n: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Benchmark(a) => benchmark_cmd(a),
        Command::AblateBins(a) => ablate(a),
    }
}

fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".heightformer"))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn make_synthetic(a: MakeSynthetic) -> Result<()> {
    let root = a.out.unwrap_or_else(|| cache_dir().join("synthetic"));
    if a.size % 32 != 0 || a.size == 0 {
        return Err(Error::Config(format!("--size must be a positive multiple of 32, got {}", a.size)));
    }
    for (split, count, base) in [("train", a.train_scenes, 0u64), ("val", a.val_scenes, 1_000_000)] {
        for i in 0..count {
            let seed = a.seed.wrapping_mul(10_000_019).wrapping_add(base + i as u64);
            let spec = if a.bimodal {
                SynthSpec::bimodal(a.size, a.size, seed)
            } else {
                SynthSpec {
                    rows: a.size,
                    cols: a.size,
                    seed,
                    ..SynthSpec::default()
                }
            };
            let scene = synth_scene(&spec)?;
            write_scene(&root.join(split), &format!("scene_{i:03}"), &scene)?;
        }
    }
    println!("wrote {} train and {} val scenes under {}", a.train_scenes, a.val_scenes, root.display());
    Ok(())
}

/// Load a dataset root and cut every scene into `tile`-sized pieces.
fn load_tiles(root: &Path, tile: usize, sentinel: f32, stems: &[String]) -> Result<Vec<TilePair>> {
    let mut out = Vec::new();
    for (stem, ip, dp) in list_pairs(root)? {
        if !stems.is_empty() && !stems.contains(&stem) {
            continue;
        }
        let t = load_tile_pair(&ip, &dp, sentinel, None)?;
        if t.size() == (tile, tile) {
            out.push(t);
        } else {
            out.extend(crop_grid(&t.pair, tile, &stem)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no tiles selected under {}", root.display())));
    }
    Ok(out)
}

fn union_range(tiles: &[TilePair]) -> Result<HeightRange> {
    let lo = tiles.iter().map(|t| t.pair.range.min).fold(f64::INFINITY, f64::min);
    let hi = tiles.iter().map(|t| t.pair.range.max).fold(f64::NEG_INFINITY, f64::max);
    HeightRange::new(lo, hi)
}

/// Sets the model height range to the union of the training tiles' ranges,
/// leaving any bound given explicitly in the config alone.
pub fn fit_range(cfg: &mut RunConfig, train: &[TilePair]) -> Result<()> {
    let data_range = union_range(train)?;
    if !cfg.is_set("model.h_min") {
        cfg.model.range.min = data_range.min;
    }
    if !cfg.is_set("model.h_max") {
        cfg.model.range.max = data_range.max;
    }
    Ok(())
}

struct Splits {
    train: Vec<TilePair>,
    val: Vec<TilePair>,
}

fn load_splits(cfg: &mut RunConfig) -> Result<Splits> {
    let train_root = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let train = load_tiles(&train_root, cfg.data.tile, cfg.data.sentinel, &cfg.data.train_stems)?;
    let val = match &cfg.data.val {
        Some(v) => load_tiles(v, cfg.data.tile, cfg.data.sentinel, &cfg.data.val_stems)?,
        None => Vec::new(),
    };
    fit_range(cfg, &train)?;
    Ok(Splits { train, val })
}

fn train(a: Train) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    let splits = load_splits(&mut cfg)?;
    cfg.validate()?;
    let out = a.out.unwrap_or_else(|| cache_dir().join("runs").join("train"));
    create_dir(&out)?;
    write_text(&out.join("resolved.cfg"), &cfg.snapshot())?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?, &cfg.train, splits.train)?,
        None => Trainer::new(&cfg.model, &cfg.train, splits.train)?,
    };
    trainer.set_output_dir(&out)?;
    let total = trainer.total_steps();
    trainer.run(&splits.val, |r| {
        if r.step == 1 || r.step % 10 == 0 || r.step == total {
            println!("step {:>6}/{total}  lr {:.3e}  loss {:.5}", r.step, r.lr, r.loss);
        }
    })?;
    println!("checkpoints and log written to {}", out.display());
    Ok(())
}

fn dsm_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [dir.join("dsm"), dir.to_path_buf()]
        .into_iter()
        .flat_map(|d| ["f32", "tif", "tiff"].map(|e| d.join(format!("{stem}.{e}"))))
        .find(|p| p.exists())
}

fn pred_stems(dir: &Path) -> Result<Vec<String>> {
    let sub = dir.join("dsm");
    let d = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
        let p = entry.map_err(|e| Error::io(&d, e))?.path();
        if matches!(p.extension().and_then(|e| e.to_str()), Some("f32" | "tif" | "tiff")) {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn report_outputs(report: &MetricsReport, out: Option<&Path>) -> Result<()> {
    println!("{}", report.to_table());
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("metrics.json"), &(report.to_json() + "\n"))?;
        write_text(&dir.join("metrics.txt"), &(report.to_table() + "\n"))?;
    }
    Ok(())
}

fn evaluate_cmd(a: Evaluate) -> Result<()> {
    let gt_pairs = list_pairs(&a.gt)?;
    let mut names = Vec::new();
    let mut preds: Vec<Vec<f64>> = Vec::new();
    let mut gts: Vec<Vec<f64>> = Vec::new();
    let mut masks: Vec<Vec<bool>> = Vec::new();
    let mut h_min = f64::INFINITY;
    if let Some(ck) = &a.checkpoint {
        let (model, _) = load_model(ck)?;
        for (stem, ip, dp) in &gt_pairs {
            let t = load_tile_pair(ip, dp, crate::data::DEFAULT_SENTINEL, None)?;
            let p = predict_scene(&model, &t.pair.image, t.pair.rows, t.pair.cols, t.pair.rows.min(t.pair.cols) / 32 * 32, 0)?;
            h_min = h_min.min(t.pair.range.min);
            names.push(stem.clone());
            preds.push(p.heights.iter().map(|&v| v as f64).collect());
            gts.push(t.pair.dsm.iter().map(|&v| v as f64).collect());
            masks.push(t.pair.mask);
        }
    } else {
        let pred_dir = a.pred.clone().expect("clap enforces --pred without --checkpoint");
        let have = pred_stems(&pred_dir)?;
        let want: Vec<&String> = gt_pairs.iter().map(|(s, _, _)| s).collect();
        let mut unmatched: Vec<String> = want.iter().filter(|s| !have.contains(s)).map(|s| s.to_string()).collect();
        unmatched.extend(have.iter().filter(|s| !want.contains(s)).cloned());
        if !unmatched.is_empty() {
            return Err(Error::Data(format!("prediction and ground-truth sets differ; unmatched stems: {}", unmatched.join(", "))));
        }
        for (stem, ip, dp) in &gt_pairs {
            let t = load_tile_pair(ip, dp, crate::data::DEFAULT_SENTINEL, None)?;
            let pp = dsm_file(&pred_dir, stem).ok_or_else(|| Error::Data(format!("missing prediction for `{stem}`")))?;
            let (r, c, p, _) = crate::data::read_dsm(&pp)?;
            if (r, c) != t.size() {
                return Err(Error::DimensionMismatch(format!("{} is {r}×{c}, ground truth is {:?}", pp.display(), t.size())));
            }
            h_min = h_min.min(t.pair.range.min);
            names.push(stem.clone());
            preds.push(p.iter().map(|&v| v as f64).collect());
            gts.push(t.pair.dsm.iter().map(|&v| v as f64).collect());
            masks.push(t.pair.mask);
        }
    }
    let views: Vec<TileView> = (0..names.len())
        .map(|i| TileView {
            name: &names[i],
            pred: &preds[i],
            gt: &gts[i],
            mask: &masks[i],
        })
        .collect();
    let cfg = MetricsConfig {
        h_min: a.h_min.unwrap_or(h_min),
        offset_m: a.offset,
        ..MetricsConfig::default()
    };
    let report = evaluate(&views, &cfg)?;
    report_outputs(&report, a.out.as_deref())
}

fn predict(a: Predict) -> Result<()> {
    let (model, ck) = load_model(&a.checkpoint)?;
    let range = model.config().range;
    let img_dir = a.input.join("images");
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(&img_dir).map_err(|e| Error::io(&img_dir, e))? {
        let p = entry.map_err(|e| Error::io(&img_dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some("png") {
            stems.push(p);
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(Error::Data(format!("no PNG images under {}", img_dir.display())));
    }
    for sub in ["dsm", "render"] {
        create_dir(&a.out.join(sub))?;
    }
    let mut snapshot = RunConfig::default();
    snapshot.model = ck.meta.model.clone();
    if let Some(t) = &ck.meta.train {
        snapshot.train = t.clone();
    }
    write_text(&a.out.join("resolved.cfg"), &snapshot.snapshot())?;
    let mut bins_json = String::from("{");
    for (k, ip) in stems.iter().enumerate() {
        let stem = ip.file_stem().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
        let (rows, cols, image) = read_png_rgb(ip)?;
        let p = predict_scene(&model, &image, rows, cols, a.tile, a.overlap)?;
        let header = DsmHeader {
            rows,
            cols,
            resolution: 1.0,
            range,
        };
        write_dsm_f32(&a.out.join("dsm").join(format!("{stem}.f32")), &p.heights, &header)?;
        write_height_png(
            &a.out.join("render").join(format!("{stem}_height.png")),
            &p.heights,
            rows,
            cols,
            range.min as f32,
            range.max as f32,
        )?;
        if let Some(dp) = dsm_file(&a.input, &stem) {
            let t = load_tile_pair(ip, &dp, crate::data::DEFAULT_SENTINEL, Some(range))?;
            write_error_png(
                &a.out.join("render").join(format!("{stem}_error.png")),
                &p.heights,
                &t.pair.dsm,
                &t.pair.mask,
                rows,
                cols,
            )?;
        }
        let tiles: Vec<String> = p
            .bins
            .iter()
            .map(|b| format!("[{}]", b.iter().map(|v| format_sig6(*v)).collect::<Vec<_>>().join(", ")))
            .collect();
        let _ = write!(
            bins_json,
            "{}\"{stem}\": [{}]",
            if k > 0 { ", " } else { "" },
            tiles.join(", ")
        );
        println!("{stem}: {} tiles", p.origins.len());
    }
    bins_json.push_str("}\n");
    write_text(&a.out.join("bins.json"), &bins_json)
}

fn benchmark_cmd(a: Benchmark) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => load_model(p)?.0,
        None => {
            let cfg = a.cfg.resolve()?;
            cfg.model.validate()?;
            crate::model::HeightFormer::new(&cfg.model, cfg.train.seed, candle_core::DType::F32)?
        }
    };
    if a.size % 32 != 0 || a.size == 0 {
        return Err(Error::Config(format!("--size must be a positive multiple of 32, got {}", a.size)));
    }
    let rep = benchmark(&model, a.size, a.size, a.reps, a.warmup)?;
    let json = serde_json::to_string_pretty(&rep).map_err(|e| Error::Data(e.to_string()))?;
    println!("{json}");
    println!("{}", model.count_parameters());
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_text(&dir.join("benchmark.json"), &(json + "\n"))?;
    }
    Ok(())
}

/// One row of the bin ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub source: BinSource,
    pub bins: usize,
    pub report: MetricsReport,
}

/// Table with one row per (bin source, N).
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<10} {:>4} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "bins", "N", "Rel", "RMSE(log)", "delta1", "delta2", "delta3"
    );
    for src in [BinSource::Fixed, BinSource::Adaptive] {
        for r in rows.iter().filter(|r| r.source == src) {
            let v = &r.report.pooled;
            let _ = writeln!(
                out,
                "{:<10} {:>4} {:>10} {:>10} {:>10} {:>10} {:>10}",
                src.to_string(),
                r.bins,
                format_sig6(v.rel),
                format_sig6(v.rmse_log),
                format_sig6(v.delta1),
                format_sig6(v.delta2),
                format_sig6(v.delta3)
            );
        }
    }
    out
}

/// Train every (source, N) variant with the same budget and data and
/// evaluate on `val` (or on the training tiles when `val` is empty).
pub fn run_ablation(base: &RunConfig, train: &[TilePair], val: &[TilePair], ns: &[usize], mut progress: impl FnMut(&str)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        for src in [BinSource::Fixed, BinSource::Adaptive] {
            let mut cfg = base.clone();
            cfg.model.set_bins(n);
            cfg.model.decoder.bin_source = src;
            cfg.validate()?;
            let mut trainer = Trainer::new(&cfg.model, &cfg.train, train.to_vec())?;
            while !trainer.is_done() {
                trainer.step()?;
            }
            let eval_set = if val.is_empty() { train } else { val };
            let report = validate(trainer.model(), eval_set, cfg.train.offset_m)?;
            progress(&format!("{src} N={n}: rel {}", format_sig6(report.pooled.rel)));
            rows.push(AblationRow {
                source: src,
                bins: n,
                report,
            });
        }
    }
    Ok(rows)
}

fn ablate(a: AblateBins) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    let splits = load_splits(&mut cfg)?;
    cfg.validate()?;
    let out = a.out.unwrap_or_else(|| cache_dir().join("runs").join("ablate-bins"));
    create_dir(&out)?;
    write_text(&out.join("resolved.cfg"), &cfg.snapshot())?;
    let rows = run_ablation(&cfg, &splits.train, &splits.val, &a.n, |m| println!("{m}"))?;
    let table = ablation_table(&rows);
    println!("{table}");
    write_text(&out.join("ablation.txt"), &table)?;
    let mut json = String::from("[");
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(
            json,
            "{}{{\"bins\": \"{}\", \"n\": {}, \"metrics\": {}}}",
            if i > 0 { ", " } else { "" },
            r.source,
            r.bins,
            r.report.to_json()
        );
    }
    json.push_str("]\n");
    write_text(&out.join("ablation.json"), &json)
}
