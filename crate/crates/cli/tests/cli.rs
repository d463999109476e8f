use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "seed": 7,
  "vae": {"c": 4, "d": 3, "widths": [4, 4], "alpha": 1.0, "beta": 1.0, "gamma": 0.0,
          "train_steps": 6, "batch": 2, "lr": 0.001, "lr_min": 0.0001},
  "dit": {"depth": 1, "heads": 2, "hidden": 16, "rope_split": [2, 2, 2, 2], "steps": 2,
          "mlp_ratio": 2, "text_dim": 8},
  "data": {"count": 4, "areas": [256], "ar_range": [1.0, 1.0], "layer_counts": [1, 2]},
  "train": {"lr": 0.001, "lr_min": 0.0001, "schedule": "cosine", "steps": 4, "batch": 1}
}"#;

fn layerdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerdiff"))
        .current_dir(dir)
        .args(["--log-every", "0"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = layerdiff(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), TINY).unwrap();
    dir
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn init_config_round_trips_and_unknown_keys_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["init-config", "--out", "desk.json"]);
    let written = json(dir.path().join("desk.json"));
    assert_eq!(written["train"]["steps"], 5000);
    ok(dir.path(), &["--config", "desk.json", "init-config", "--out", "again.json"]);
    assert_eq!(
        std::fs::read(dir.path().join("desk.json")).unwrap(),
        std::fs::read(dir.path().join("again.json")).unwrap()
    );

    let mut bad = written.clone();
    bad["vae"]["dropout"] = 0.1.into();
    std::fs::write(dir.path().join("bad.json"), bad.to_string()).unwrap();
    let out = layerdiff(dir.path(), &["--config", "bad.json", "gen-data"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));

    let out = layerdiff(dir.path(), &["--preset", "paper-full", "gen-data"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn composite_reproduces_stored_corpus_composites() {
    let dir = tiny_dir();
    let d = dir.path();
    ok(d, &["--config", "run.json", "gen-data"]);
    let report = json(d.join("reports/gen-data.json"));
    assert_eq!(report["command"], "gen-data");
    assert_eq!(report["count"], 4);
    for fmt in ["png", "lrga"] {
        ok(d, &["--config", "run.json", "gen-data", "--out", fmt, "--format", fmt]);
        for i in 0..4 {
            let prefix = format!("{i:05}_");
            ok(d, &["composite", &format!("{fmt}/images"), "--prefix", &prefix]);
            let r = json(d.join(format!("{fmt}/images/{prefix}recomposed.json")));
            assert_eq!(r["max_abs_diff"], 0.0, "{fmt} design {i}");
        }
    }
    let out = layerdiff(d, &["composite", "png"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tiny_dir();
    let d = dir.path();
    let cfg = ["--config", "run.json"];
    let with = |rest: &[&str]| -> Vec<String> { cfg.iter().chain(rest).map(|s| s.to_string()).collect() };
    let run = |rest: &[&str]| {
        let args = with(rest);
        ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run(&["gen-data"]);
    run(&["train-vae"]);
    assert!(d.join("vae.ldck").is_file());
    run(&["train-dit"]);
    let first = json(d.join("reports/train-dit.json"));
    assert_eq!(first["end_step"], 4);
    // resuming a finished run trains no further
    run(&["train-dit", "--resume"]);
    let resumed = json(d.join("reports/train-dit.json"));
    assert_eq!((resumed["start_step"].clone(), resumed["end_step"].clone()), (4.into(), 4.into()));
    assert_eq!(resumed["checkpoint_sha256"], first["checkpoint_sha256"]);

    run(&["generate", "--prompt", "a poster", "--layers", "0", "--width", "16", "--height", "16", "--out", "t2i"]);
    assert_eq!(files(&d.join("t2i")), ["composite.png", "report.json"]);
    run(&["generate", "--prompt", "a poster", "--layers", "3", "--width", "16", "--height", "16", "--out", "t2l"]);
    assert_eq!(
        files(&d.join("t2l")),
        ["composite.png", "layer1.png", "layer2.png", "layer3.png", "report.json"]
    );
    let report = json(d.join("t2l/report.json"));
    assert_eq!(report["command"], "generate");
    assert_eq!(report["images"].as_array().unwrap().len(), 4);

    // same seed, same bytes
    run(&["generate", "--prompt", "a poster", "--layers", "3", "--width", "16", "--height", "16", "--out", "t2l2"]);
    assert_eq!(
        std::fs::read(d.join("t2l/report.json")).unwrap(),
        std::fs::read(d.join("t2l2/report.json")).unwrap()
    );

    run(&["decompose", "--input", "t2l/composite.png", "--layers", "2", "--out", "i2l"]);
    assert_eq!(
        files(&d.join("i2l")),
        ["layer1.png", "layer2.png", "recomposed.png", "report.json"]
    );
    assert!(json(d.join("i2l/report.json"))["psnr_db"].as_f64().unwrap() > 0.0);

    run(&["eval", "--designs", "2"]);
    let eval = json(d.join("reports/eval.json"));
    assert_eq!(eval["decomposition"].as_array().unwrap().len(), 2);

    // mismatched caption count
    let out = layerdiff(
        d,
        &with(&["generate", "--prompt", "Scene Description: x\nLayers Caption:\n- Layer 1: a red circle\nType: poster", "--layers", "2", "--out", "x"])
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1 layer captions but --layers is 2"));

    // flip one payload byte
    let mut bytes = std::fs::read(d.join("dit.ldck")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(d.join("dit.ldck"), bytes).unwrap();
    let out = layerdiff(
        d,
        &with(&["generate", "--prompt", "a poster", "--layers", "1", "--width", "16", "--height", "16", "--out", "y"])
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let out = layerdiff(d, &["generate", "--prompt", "a poster", "--layers", "1", "--dit", "missing.ldck", "--out", "z"]);
    assert_eq!(out.status.code(), Some(5));
}
