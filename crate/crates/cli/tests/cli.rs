use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn facesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facesim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = facesim(args);
    assert!(
        out.status.success(),
        "facesim {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Every file under `root` with its bytes, sorted by path.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn corpus_at(tmp: &TempDir, identities: &str, (w, h): (&str, &str)) -> PathBuf {
    let dir = tmp.path().join("corpus");
    ok(&["gen-data", "--identities", identities, "--seed", "7", "--width", w, "--height", h, "--out", s(&dir)]);
    dir
}

fn small_corpus(tmp: &TempDir, identities: &str) -> PathBuf {
    corpus_at(tmp, identities, ("90", "99"))
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = small_corpus(&tmp, "3");
    let b = tmp.path().join("again");
    ok(&["gen-data", "--identities", "3", "--seed", "7", "--width", "90", "--height", "99", "--out", s(&b)]);
    let pngs = snapshot(&a).iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count();
    assert_eq!(pngs, 30);
    assert!(a.join("manifest.json").is_file());
    let strip_out = |mut v: Vec<(PathBuf, Vec<u8>)>| {
        v.retain(|(p, _)| p != Path::new("run.json"));
        v
    };
    assert_eq!(strip_out(snapshot(&a)), strip_out(snapshot(&b)));
}

#[test]
fn gen_data_rejects_single_identity() {
    let tmp = TempDir::new().unwrap();
    let out = facesim(&["gen-data", "--identities", "1", "--out", s(&tmp.path().join("c"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("need >= 2 identities"));
}

#[test]
fn train_detect_and_export() {
    let tmp = TempDir::new().unwrap();
    // full size: at 90x99 the matching window covers almost the whole image
    let corpus = corpus_at(&tmp, "5", ("140", "154"));
    let before = snapshot(&corpus);
    let models = tmp.path().join("models");
    ok(&["train", "--corpus", s(&corpus), "--out", s(&models)]);
    assert_eq!(snapshot(&corpus), before, "train must not touch its input");
    for f in ["transcoder.json", "latent_space.json", "training_log.json", "run.json"] {
        assert!(models.join(f).is_file(), "missing {f}");
    }

    let log = read_json(&models.join("training_log.json"));
    assert!(log["final_log_likelihood"].is_f64());
    let mut histories: Vec<&Value> = log["gplvm"]["leaves"].as_object().unwrap().values().collect();
    histories.push(&log["gplvm"]["root"]);
    for h in histories {
        let v: Vec<f64> = h["history"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] >= w[0]), "likelihood must not decrease");
    }

    // training twice gives identical artifacts
    let again = tmp.path().join("models2");
    ok(&["train", "--corpus", s(&corpus), "--out", s(&again)]);
    for f in ["transcoder.json", "latent_space.json", "training_log.json"] {
        assert_eq!(fs::read(models.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f} differs");
    }

    let det = tmp.path().join("det");
    let smile = corpus.join("subjects/2/smile.png");
    ok(&["detect", "--models", s(&models), "--image", s(&smile), "--out", s(&det)]);
    let d = read_json(&det.join("detection.json"));
    assert_eq!(d["x_star"].as_array().unwrap().len(), 2);
    assert!(d["score"].is_f64());
    assert!(d["predicted_label"].is_string());
    assert!(Path::new(d["transcoded_image"].as_str().unwrap()).is_file());
    assert!(Path::new(d["generated_image"].as_str().unwrap()).is_file());

    for label in ["anger", "fear", "delight"] {
        let gt = corpus.join(format!("observer/{label}.png"));
        let out = tmp.path().join(format!("gt-{label}"));
        ok(&["detect", "--models", s(&models), "--image", s(&gt), "--out", s(&out), "--skip-transcode"]);
        let d = read_json(&out.join("detection.json"));
        assert_eq!(d["predicted_label"], label);
        assert!(d["transcoded_image"].is_null());
    }

    let csv = tmp.path().join("latents.csv");
    ok(&["export-latents", "--models", s(&models), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("label,x1,x2"));
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn train_rejects_latent_dim_above_expression_count() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(&tmp, "3");
    let out = facesim(&["train", "--corpus", s(&corpus), "--out", s(&tmp.path().join("m")), "--l", "20"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("latent_dim"));
}

#[test]
fn detect_names_missing_model_file() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = facesim(&["detect", "--models", s(&missing), "--image", "x.png", "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("latent_space.json"));
}

#[test]
fn fixture_mode_passes() {
    let tmp = TempDir::new().unwrap();
    let out = ok(&["evaluate", "--fixtures", "--out", s(tmp.path())]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 12);
    assert!(!stdout.contains("FAIL"));
    assert!(tmp.path().join("fixtures.json").is_file());
}

#[test]
fn evaluate_small_corpus() {
    let tmp = TempDir::new().unwrap();
    let corpus = small_corpus(&tmp, "5");
    let out = tmp.path().join("eval");
    ok(&[
        "evaluate", "--corpus", s(&corpus), "--out", s(&out), "--refinement", "none", "--vocabulary-count", "100",
    ]);
    for f in [
        "report.json",
        "records.csv",
        "confusion_baseline.csv",
        "confusion_model.csv",
        "metrics_baseline.csv",
        "metrics_model.csv",
        "run.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let r = read_json(&out.join("report.json"));
    let total: u64 = r["model_confusion"]["counts"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|row| row.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()))
        .sum();
    assert_eq!(total, 40);
    assert_eq!(r["significance"].as_array().unwrap().len(), 5);
    assert_eq!(fs::read_to_string(out.join("records.csv")).unwrap().lines().count(), 41);
    let run = read_json(&out.join("run.json"));
    assert_eq!(run["refinement"], "none");
    assert_eq!(run["dims"], serde_json::json!([90, 99]));
}

#[test]
fn config_file_is_read_and_unknown_keys_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"latent_dim": 12}"#).unwrap();
    let out = facesim(&["evaluate", "--corpus", "c", "--out", "o", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("latent_dim"));
    fs::write(&cfg, r#"{"latnt_dim": 3}"#).unwrap();
    let out = facesim(&["evaluate", "--corpus", "c", "--out", "o", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("latnt_dim"));
}
