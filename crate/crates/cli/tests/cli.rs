use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dfdetect"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &[&str] = &[
    "--real", "8", "--fake", "8", "--width", "16", "--height", "16", "--frames", "20",
    "--trace-seconds", "10",
];

fn synth(dir: &Path, out: &str, seed: &str) {
    let mut args = vec!["synth", "--seed", seed, "--out", out];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_manifest_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["synth", "--seed", "7", "--out", "a"];
    args.extend_from_slice(SMALL);
    let printed = ok(d, &args);
    assert_eq!(printed.trim(), Path::new("a").join("manifest.json").to_str().unwrap());
    synth(d, "b", "7");
    assert_eq!(tree(&d.join("a")), tree(&d.join("b")));

    let manifest = json(&d.join("a/manifest.json"));
    let entries = manifest.as_object().unwrap();
    assert_eq!(entries.len(), 16);
    let fakes = entries.values().filter(|e| e["label"] == "FAKE").count();
    assert_eq!(fakes, 8);
    let run = json(&d.join("a/synth.run.json"));
    assert_eq!(run["seed"], 7);
    assert_eq!(run["synth"]["real"], 8);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["synth", "--real", "0", "--out", "x"][..],
        &["synth", "--real", "2"][..],
        &["train", "--model", "cnn", "--manifest", "m", "--features", "f", "--out", "o"][..],
        &["bogus"][..],
    ] {
        let out = run(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn extract_output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "ds", "1");
    ok(d, &["extract", "--manifest", "ds/manifest.json", "--out", "h1", "--threads", "1"]);
    ok(d, &["extract", "--manifest", "ds/manifest.json", "--out", "h8", "--threads", "8"]);
    let (a, b) = (tree(&d.join("h1")), tree(&d.join("h8")));
    assert_eq!(a.len(), 17);
    assert_eq!(a, b);

    ok(d, &["blinks", "--manifest", "ds/manifest.json", "--out", "b1", "--threads", "1"]);
    ok(d, &["blinks", "--manifest", "ds/manifest.json", "--out", "b8", "--threads", "8"]);
    assert_eq!(tree(&d.join("b1")), tree(&d.join("b8")));
}

#[test]
fn extract_reports_missing_videos() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "ds", "2");
    fs::remove_file(d.join("ds/videos/vid00003.y4m")).unwrap();
    let out = run(d, &["extract", "--manifest", "ds/manifest.json", "--out", "h"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("vid00003"), "{err}");
    assert!(err.contains("1 of 16"), "{err}");
    assert!(d.join("h/vid00004.fhs").is_file());
}

fn blink_count(dir: &Path) -> u64 {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with("vid"))
        .map(|p| json(&p)["blinks"].as_array().unwrap().len() as u64)
        .sum()
}

#[test]
fn blink_thresholds_are_recorded_and_matter() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "ds", "3");
    ok(d, &["blinks", "--manifest", "ds/manifest.json", "--out", "b"]);
    let report = json(&d.join("b/vid00000.json"));
    assert_eq!(report["params"]["threshold"], 0.2);
    assert_eq!(report["params"]["min_consec"], 3);

    ok(d, &["blinks", "--manifest", "ds/manifest.json", "--out", "loose", "--min-consec", "1", "--threshold", "0.25"]);
    ok(d, &["blinks", "--manifest", "ds/manifest.json", "--out", "loose2", "--min-consec", "1", "--threshold", "0.25"]);
    ok(d, &["blinks", "--manifest", "ds/manifest.json", "--out", "strict", "--min-consec", "30"]);
    assert_eq!(tree(&d.join("loose")), tree(&d.join("loose2")));
    assert_eq!(json(&d.join("loose/vid00000.json"))["params"]["threshold"], 0.25);
    let base = blink_count(&d.join("b"));
    assert!(base > 0);
    assert!(blink_count(&d.join("loose")) >= base);
    assert_eq!(blink_count(&d.join("strict")), 0);
}

#[test]
fn malformed_landmarks_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "ds", "4");
    let path = d.join("ds/landmarks/vid00002.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    let second = text.find('\n').unwrap() + 1;
    let third = second + text[second..].find('\n').unwrap() + 1;
    text.replace_range(second..third, "{\"frame\": 1, \"points\": [[1, 2]]}\n");
    fs::write(&path, text).unwrap();
    let out = run(d, &["blinks", "--manifest", "ds/manifest.json", "--out", "b"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("vid00002") && err.contains("line 2"), "{err}");
}

#[test]
fn train_predict_evaluate_hist_lstm() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "ds", "5");
    ok(d, &["extract", "--manifest", "ds/manifest.json", "--out", "h", "--format", "json"]);
    let train = |out: &str| {
        ok(d, &[
            "train", "--model", "hist-lstm", "--manifest", "ds/manifest.json", "--features", "h",
            "--epochs", "3", "--seed", "9", "--out", out,
        ])
    };
    train("m1");
    train("m2");
    assert_eq!(tree(&d.join("m1")), tree(&d.join("m2")));

    let metrics = fs::read_to_string(d.join("m1/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_accuracy,val_loss,val_accuracy");
    assert_eq!(lines.len(), 4);
    let model = json(&d.join("m1/model.json"));
    assert_eq!(model["format"], "fsv1");
    assert_eq!(model["meta"]["run"]["seed"], 9);
    assert_eq!(model["meta"]["run"]["train"]["epochs"], 3);
    let split = json(&d.join("m1/split.json"));
    let n_test = split["test"].as_array().unwrap().len();
    assert!(n_test >= 2);

    ok(d, &[
        "predict", "--model", "m1/model.json", "--manifest", "ds/manifest.json", "--features", "h",
        "--split", "m1/split.json", "--out", "p",
    ]);
    let csv = fs::read_to_string(d.join("p/predictions.csv")).unwrap();
    assert!(csv.starts_with("video_id,p_fake\n"));
    assert_eq!(csv.lines().count(), n_test + 1);

    let printed = ok(d, &[
        "evaluate", "--predictions", "p/predictions.csv", "--manifest", "ds/manifest.json",
        "--tag", "hist-lstm", "--out", "e",
    ]);
    assert!(printed.contains(&format!("n={n_test}")), "{printed}");
    let report = json(&d.join("e/report.json"));
    assert_eq!(report["model_tag"], "hist-lstm");
    assert_eq!(report["config"]["command"], "evaluate");
    let scores = fs::read_to_string(d.join("e/scores.dat")).unwrap();
    assert!(scores.starts_with('#'));
    assert_eq!(scores.lines().count(), 21);
}

#[test]
fn blink_knn_model_file_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "ds", "6");
    ok(d, &["blinks", "--manifest", "ds/manifest.json", "--out", "b"]);
    ok(d, &[
        "train", "--model", "blink-knn", "--manifest", "ds/manifest.json", "--features", "b",
        "--k", "3", "--out", "k",
    ]);
    let model = json(&d.join("k/model.json"));
    assert_eq!(model["k"], 3);
    assert_eq!(model["means"].as_array().unwrap().len(), 4);
    assert_eq!(model["stds"].as_array().unwrap().len(), 4);
    let metrics = fs::read_to_string(d.join("k/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert_eq!(json(&d.join("k/train.run.json"))["train"]["model"], "blink-knn");

    let out = run(d, &[
        "train", "--model", "blink-knn", "--manifest", "ds/manifest.json", "--features", "b",
        "--k", "4", "--out", "k4",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn manifest_of(d: &Path, labels: &[(&str, &str)]) -> PathBuf {
    let body: serde_json::Map<String, Value> = labels
        .iter()
        .map(|(id, l)| (id.to_string(), serde_json::json!({ "label": l })))
        .collect();
    let path = d.join("manifest.json");
    fs::write(&path, serde_json::to_vec(&body).unwrap()).unwrap();
    path
}

#[test]
fn evaluate_closed_forms_and_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    manifest_of(d, &[("a", "FAKE"), ("b", "REAL"), ("c", "REAL"), ("d", "FAKE")]);

    fs::write(d.join("half.csv"), "video_id,p_fake\na,0.5\nb,0.5\nc,0.5\nd,0.5\n").unwrap();
    ok(d, &["evaluate", "--predictions", "half.csv", "--manifest", "manifest.json", "--out", "h"]);
    let r = json(&d.join("h/report.json"));
    assert!((r["log_loss"].as_f64().unwrap() - 0.693147).abs() < 1e-6);

    fs::write(d.join("perfect.csv"), "video_id,p_fake\na,1\nb,0\nc,0\nd,1\n").unwrap();
    ok(d, &["evaluate", "--predictions", "perfect.csv", "--manifest", "manifest.json", "--out", "p"]);
    let r = json(&d.join("p/report.json"));
    assert_eq!(r["accuracy"], 1.0);
    assert!(r["log_loss"].as_f64().unwrap() <= 3.5e-14);

    fs::write(d.join("stray.csv"), "video_id,p_fake\na,0.2\nzzz,0.9\n").unwrap();
    let out = run(d, &["evaluate", "--predictions", "stray.csv", "--manifest", "manifest.json", "--out", "s"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zzz"));
}

#[test]
fn config_file_fills_flags_and_reproduces_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "ds", "8");
    // The run record doubles as a config file.
    ok(d, &["synth", "--config", "ds/synth.run.json", "--out", "again"]);
    assert_eq!(tree(&d.join("ds")), tree(&d.join("again")));

    fs::write(
        d.join("cfg.json"),
        r#"{"seed": 4, "synth": {"real": 3, "fake": 2, "frames": 5, "width": 8, "height": 8, "no_landmarks": true}}"#,
    )
    .unwrap();
    ok(d, &["synth", "--config", "cfg.json", "--fake", "4", "--out", "c"]);
    let run = json(&d.join("c/synth.run.json"));
    assert_eq!(run["seed"], 4);
    assert_eq!(run["synth"]["real"], 3);
    assert_eq!(run["synth"]["fake"], 4);
    assert!(!d.join("c/landmarks").exists());
    assert_eq!(json(&d.join("c/manifest.json")).as_object().unwrap().len(), 7);
}
