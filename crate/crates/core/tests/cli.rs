mod common;

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_heightformer");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_BACKTRACE", "0").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_data(root: &Path) {
    let o = run(&["make-synthetic", "--out", p(root), "--train-scenes", "2", "--val-scenes", "1", "--size", "64", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn write_cfg(dir: &Path, root: &Path) -> std::path::PathBuf {
    let cfg = dir.join("micro.cfg");
    let text = format!(
        "{}train.epochs = 1\ndata.train = {}\ndata.val = {}\n",
        common::MICRO_CFG,
        root.join("train").display(),
        root.join("val").display()
    );
    std::fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in ["make-synthetic", "train", "evaluate", "predict", "benchmark", "ablate-bins"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("--"), "{sub} help lists no flags");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn unknown_config_key_is_named() {
    let o = run(&["benchmark", "--size", "32", "--set", "decoder.qurey_dim=8"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("decoder.qurey_dim"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_named() {
    let o = run(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.cfg"));
}

#[test]
fn cache_dir_default_for_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["make-synthetic", "--train-scenes", "1", "--val-scenes", "0", "--size", "32"])
        .env("HEIGHTFORMER_CACHE", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("synthetic/train/images/scene_000.png").exists());
    assert!(dir.path().join("synthetic/train/dsm/scene_000.f32").exists());
}

#[test]
fn train_predict_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_data(&data);
    let cfg = write_cfg(dir.path(), &data);
    let run_dir = dir.path().join("run");

    let o = run(&["train", "--config", p(&cfg), "--out", p(&run_dir)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["last.safetensors", "best.safetensors", "epoch_001.safetensors", "train_log.jsonl", "resolved.cfg"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.contains("\"lr\"") && log.contains("\"wall_time\""));
    let resolved = std::fs::read_to_string(run_dir.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("model.bins = 4"));

    let ck = run_dir.join("last.safetensors");
    let pred_dir = dir.path().join("pred");
    let o = run(&["predict", "--checkpoint", p(&ck), "--input", p(&data.join("val")), "--out", p(&pred_dir), "--tile", "64", "--overlap", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["dsm/scene_000.f32", "dsm/scene_000.hdr", "render/scene_000_height.png", "render/scene_000_error.png", "bins.json", "resolved.cfg"] {
        assert!(pred_dir.join(f).exists(), "missing {f}");
    }

    let eval = |out: &Path| {
        let o = run(&["evaluate", "--pred", p(&pred_dir), "--gt", p(&data.join("val")), "--out", p(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("rmse_log"));
        std::fs::read(out.join("metrics.json")).unwrap()
    };
    let a = eval(&dir.path().join("e1"));
    let b = eval(&dir.path().join("e2"));
    assert_eq!(a, b);
    let json: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert!(json["rel"].is_number());
    assert_eq!(json["aggregation"], "pooled");
    assert!(dir.path().join("e1/metrics.txt").exists());

    // evaluating straight from the checkpoint agrees on the pixel count
    let e3 = dir.path().join("e3");
    let o = run(&["evaluate", "--checkpoint", p(&ck), "--gt", p(&data.join("val")), "--out", p(&e3)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let direct: serde_json::Value = serde_json::from_slice(&std::fs::read(e3.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(direct["valid_pixels"], json["valid_pixels"]);
}

#[test]
fn evaluate_names_unmatched_stems() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_data(&data);
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(pred.join("dsm")).unwrap();
    std::fs::copy(data.join("train/dsm/scene_000.f32"), pred.join("dsm/scene_000.f32")).unwrap();
    std::fs::copy(data.join("train/dsm/scene_000.hdr"), pred.join("dsm/scene_000.hdr")).unwrap();
    std::fs::copy(data.join("train/dsm/scene_000.f32"), pred.join("dsm/extra_tile.f32")).unwrap();
    std::fs::copy(data.join("train/dsm/scene_000.hdr"), pred.join("dsm/extra_tile.hdr")).unwrap();
    let o = run(&["evaluate", "--pred", p(&pred), "--gt", p(&data.join("train"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("scene_001") && err.contains("extra_tile"), "{err}");
}

#[test]
fn ablation_table_has_fixed_and_adaptive_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_data(&data);
    let cfg = write_cfg(dir.path(), &data);
    let out = dir.path().join("ablate");
    let o = run(&["ablate-bins", "--config", p(&cfg), "--n", "2,4", "--set", "train.max_steps=1", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(table.lines().next().unwrap().contains("Rel"));
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, (src, n)) in rows.iter().zip([("fixed", "2"), ("fixed", "4"), ("adaptive", "2"), ("adaptive", "4")]) {
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!((cells[0], cells[1]), (src, n), "{row}");
    }
    assert!(out.join("resolved.cfg").exists());
}

#[test]
fn benchmark_reports_one_sample_per_rep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.cfg");
    std::fs::write(&cfg, common::MICRO_CFG).unwrap();
    let o = run(&["benchmark", "--config", p(&cfg), "--size", "64", "--reps", "1", "--warmup", "0", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("benchmark.json")).unwrap()).unwrap();
    assert_eq!(rep["samples_ms"].as_array().unwrap().len(), 1);
    assert!(rep["parameters"].as_u64().unwrap() > 0);
    assert!(rep["hardware"].as_str().unwrap().contains("cpu"));
}
