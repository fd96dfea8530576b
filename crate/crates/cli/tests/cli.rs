use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ehoir_core::annotation::parse_dataset;
use ehoir_core::inference::{save_predictions, FramePredictions, TripletPrediction};

fn ehoir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehoir"))
        .args(args)
        .env_remove("EHOIR_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ehoir(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(dir: &Path, seed: &str) {
    ok(&["gen", "--out", p(dir), "--seed", seed, "--n-frames", "20"]);
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn gen_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    gen_small(&a, "5");
    gen_small(&b, "5");
    gen_small(&c, "6");
    for f in ["dataset.json", "features.bin", "config.json"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_ne!(read(&a, "dataset.json"), read(&c, "dataset.json"));
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small(&a, "77");
    let out = Command::new(env!("CARGO_BIN_EXE_ehoir"))
        .args(["gen", "--out", p(&b), "--n-frames", "20"])
        .env("EHOIR_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read(&a, "dataset.json"), read(&b, "dataset.json"));
}

#[test]
fn zero_frames_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ehoir(&["gen", "--out", p(tmp.path()), "--n-frames", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_frames"));
}

#[test]
fn train_infer_eval_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "3");
    let runs: Vec<_> = ["r1", "r2"].iter().map(|r| tmp.path().join(r)).collect();
    for run in &runs {
        ok(&["train", "--data", p(&data), "--out", p(run), "--epochs", "2", "--eval-every", "1"]);
    }
    for f in ["config.json", "checkpoint.bin", "metrics.jsonl", "predictions.jsonl", "report.json", "report.txt", "buckets.csv"] {
        assert_eq!(read(&runs[0], f), read(&runs[1], f), "{f}");
    }
    assert_eq!(fs::read_to_string(runs[0].join("metrics.jsonl")).unwrap().lines().count(), 2);

    let again = tmp.path().join("again.jsonl");
    ok(&["infer", "--data", p(&data), "--run", p(&runs[0]), "--out", p(&again), "--jobs", "2"]);
    assert_eq!(read(&runs[0], "predictions.jsonl"), fs::read(&again).unwrap());

    let evald = tmp.path().join("eval");
    let table = ok(&[
        "eval",
        "--pred",
        p(&again),
        "--dataset",
        p(&data.join("dataset.json")),
        "--out",
        p(&evald),
    ]);
    assert!(table.contains("Top@G"));
    assert_eq!(read(&runs[0], "report.json"), read(&evald, "report.json"));
}

fn ground_truth_predictions(dataset: &Path) -> Vec<FramePredictions> {
    let ds = parse_dataset(dataset).unwrap();
    let n_verbs = ds.num_verbs();
    ds.test
        .iter()
        .map(|f| FramePredictions {
            frame_id: f.frame_id.clone(),
            preds: f
                .instances
                .iter()
                .map(|i| TripletPrediction {
                    involvement: i.involvement,
                    verb_id: i.verb_id,
                    object_id: i.object_id,
                    hand_boxes: i.hand_boxes.clone(),
                    object_box: i.object_box,
                    score: 1.0,
                    verb_probs: (0..n_verbs).map(|v| f64::from(u8::from(v == i.verb_id))).collect(),
                })
                .collect(),
        })
        .collect()
}

#[test]
fn eval_scores_ground_truth_perfectly_and_nothing_as_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["gen", "--out", p(&data), "--seed", "8", "--n-frames", "60"]);
    let dataset = data.join("dataset.json");

    let gt = tmp.path().join("gt.jsonl");
    save_predictions(&ground_truth_predictions(&dataset), &gt).unwrap();
    let out = tmp.path().join("gt_eval");
    ok(&["eval", "--pred", p(&gt), "--dataset", p(&dataset), "--out", p(&out)]);
    let report: serde_json::Value = serde_json::from_slice(&read(&out, "report.json")).unwrap();
    assert_eq!(report["full_map"], 1.0);
    assert_eq!(report["map50"], 1.0);
    assert_eq!(report["top_g_accuracy"], 1.0);

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = tmp.path().join("empty_eval");
    ok(&["eval", "--pred", p(&empty), "--dataset", p(&dataset), "--out", p(&out)]);
    let report: serde_json::Value = serde_json::from_slice(&read(&out, "report.json")).unwrap();
    assert_eq!(report["full_map"], 0.0);
}

#[test]
fn eval_rejects_unknown_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "2");
    let bad = tmp.path().join("bad.jsonl");
    save_predictions(&[FramePredictions { frame_id: "nope".into(), preds: vec![] }], &bad).unwrap();
    let out = ehoir(&["eval", "--pred", p(&bad), "--dataset", p(&data.join("dataset.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn ablation_flag_reaches_the_run_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "4");
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
        "--epochs",
        "1",
        "--ablation",
        "use_hpe=false,use_ir=false,use_hge=false",
    ]);
    let cfg: serde_json::Value = serde_json::from_slice(&read(&run, "config.json")).unwrap();
    assert_eq!(cfg["ablation"]["use_hpe"], false);
    assert_eq!(cfg["ablation"]["use_hge"], false);

    let bad = ehoir(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&tmp.path().join("bad")),
        "--epochs",
        "1",
        "--ablation",
        "use_hpe=false",
    ]);
    assert!(!bad.status.success());
}

#[test]
fn gradcheck_reports_every_case() {
    let out = ehoir(&["gradcheck", "--seed", "1", "--seeds", "1", "--json"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<serde_json::Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(rows.len() >= 30);
    let all_pass = rows.iter().all(|r| r["max_rel_error"].as_f64().unwrap() <= 1e-5);
    assert_eq!(out.status.success(), all_pass);
    for name in ["matmul", "softmax_rows", "layer_norm", "giou", "pose_geometry", "hgir_top_center"] {
        let r = rows.iter().find(|r| r["name"] == name).unwrap_or_else(|| panic!("missing {name}"));
        if !name.starts_with("hgir") {
            assert!(r["max_rel_error"].as_f64().unwrap() <= 1e-5, "{r}");
        }
    }
}

#[test]
fn zero_jobs_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small(&data, "2");
    let out = ehoir(&["train", "--data", p(&data), "--out", p(&tmp.path().join("r")), "--epochs", "1", "--jobs", "0"]);
    assert!(!out.status.success());
}
