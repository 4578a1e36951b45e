use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emoxfer_core::eval::{self, LabelRecord, ProbeParams, ScoreRecord};
use emoxfer_core::teacher;

fn emoxfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emoxfer"))
        .args(args)
        .env("EMOXFER_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = emoxfer(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn synth(dir: &Path, tracks: &str) -> PathBuf {
    let out = dir.join("syn");
    ok(&[
        "synth", "--out-dir", &s(&out), "--tracks", tracks, "--identities", "6", "--min-duration", "1",
        "--max-duration", "2", "--seed", "3",
    ]);
    out.join("manifest.jsonl")
}

#[test]
fn annotate_single_track_histogram_sums_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "12");
    let m = teacher::load_manifest(&manifest).unwrap();
    let one = teacher::Manifest::new(m.records[..1].to_vec(), &m.base_dir).unwrap();
    let single = dir.path().join("syn/one.jsonl");
    one.write(&single).unwrap();
    let out = dir.path().join("ann");
    ok(&["annotate", "--manifest", &s(&single), "--out-dir", &s(&out)]);
    let hist: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("histogram.json")).unwrap()).unwrap();
    let total: f64 = hist["proportions"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
    assert_eq!(total, 1.0);
    assert_eq!(hist["total"], 1);
    let labels: Vec<LabelRecord> = eval::read_jsonl(&out.join("track_labels.jsonl")).unwrap();
    assert_eq!(labels.len(), 1);
    assert!(std::fs::read_to_string(out.join("histogram.csv")).unwrap().starts_with("emotion,count,proportion\n"));
    assert!(out.join("config.json").exists());
}

#[test]
fn pipeline_probe_matches_library_and_replay_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = synth(d, "30");
    let run = d.join("run");
    ok(&[
        "distill", "--manifest", &s(&manifest), "--out-dir", &s(&run), "--epochs", "2", "--width-multiplier", "0.05",
        "--batch-size", "8", "--seed", "11",
    ]);
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,lr,train_loss,heard_val_loss,unheard_val_loss\n"));
    assert_eq!(history.lines().count(), 3);

    let ann = d.join("ann");
    ok(&["annotate", "--manifest", &s(&manifest), "--out-dir", &s(&ann)]);
    let labels_path = ann.join("track_labels.jsonl");

    let probe = d.join("probe");
    ok(&[
        "probe", "--labels", &s(&labels_path), "--model", &s(&run.join("model.evxm")), "--manifest", &s(&manifest),
        "--out-dir", &s(&probe), "--folds", "3", "--classes", "8", "--seed", "4",
    ]);
    let cli_report: serde_json::Value = serde_json::from_slice(&std::fs::read(probe.join("report.json")).unwrap()).unwrap();

    // Same report from the library on the dumped embeddings.
    let labels: Vec<LabelRecord> = eval::read_jsonl(&labels_path).unwrap();
    let scores: Vec<ScoreRecord> = eval::read_jsonl(&probe.join("scores.jsonl")).unwrap();
    let mut x = ndarray::Array2::zeros((labels.len(), 8));
    for (i, l) in labels.iter().enumerate() {
        let sc = scores.iter().find(|s| s.track_id == l.track_id).unwrap();
        for j in 0..8 {
            x[[i, j]] = sc.scores[j];
        }
    }
    let y: Vec<usize> = labels.iter().map(|l| l.label).collect();
    let lib = eval::evaluate_probe_cv(&x, &y, 8, 3, &ProbeParams::default(), 4).unwrap();
    assert_eq!(cli_report, serde_json::to_value(&lib).unwrap());

    // Replaying the echo into a fresh directory gives the same bytes.
    let replay = d.join("replay");
    ok(&["replay", &s(&run.join("config.json")), "--out-dir", &s(&replay)]);
    assert_eq!(
        std::fs::read(run.join("history.csv")).unwrap(),
        std::fs::read(replay.join("history.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(run.join("model.evxm")).unwrap(),
        std::fs::read(replay.join("model.evxm")).unwrap()
    );

    let rep = d.join("report");
    ok(&["report", "--model", &s(&run.join("model.evxm")), "--manifest", &s(&manifest), "--out-dir", &s(&rep)]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(rep.join("report.json")).unwrap()).unwrap();
    let auc = report["unheard_val"]["mean_auc"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(rep.join("confusion_unheard_val.csv").exists());
    assert!(rep.join("scores.jsonl").exists());
}

#[test]
fn extract_writes_caches() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "10");
    let out = dir.path().join("spec");
    ok(&["extract", "--manifest", &s(&manifest), "--out-dir", &s(&out), "--split", "train"]);
    let m = teacher::load_manifest(&manifest).unwrap();
    let first = m.split(emoxfer_core::Split::Train)[0];
    let spec = emoxfer_core::Spectrogram::read_cache(&out.join(format!("{}.evxs", first.track_id))).unwrap();
    assert_eq!(spec.values.nrows(), 512);
}

#[test]
fn failures_exit_nonzero_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = emoxfer(&["distill", "--bogus-flag"]);
    assert!(!out.status.success());

    let out = emoxfer(&["annotate", "--manifest", &s(&d.join("missing.jsonl")), "--out-dir", &s(d)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    let manifest = synth(d, "12");
    let out = emoxfer(&[
        "distill", "--manifest", &s(&manifest), "--out-dir", &s(&d.join("x")), "--temperature", "0",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));

    let leaky = d.join("leaky.jsonl");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let train_id = lines.iter().find(|l| l["split"] == "train").unwrap()["identity_id"].clone();
    let victim = lines.iter_mut().find(|l| l["split"] == "unheard_val").unwrap();
    victim["identity_id"] = train_id;
    let body: String = lines.iter().map(|l| l.to_string() + "\n").collect();
    std::fs::write(&leaky, body).unwrap();
    let out = emoxfer(&["annotate", "--manifest", &s(&leaky), "--out-dir", &s(&d.join("y"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("identity"));
}
