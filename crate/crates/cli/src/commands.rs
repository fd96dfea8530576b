use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use ehoir_core::annotation::{build_cooccurrence, parse_dataset, write_dataset, CooccurrenceMatrix, Dataset, FrameAnnotation};
use ehoir_core::eval::{map_suite, EvalReport};
use ehoir_core::gradsuite::{cases, run_case, CheckResult, SUITE_TOLERANCE};
use ehoir_core::inference::{load_predictions, save_predictions, FramePredictions};
use ehoir_core::numeric::{load_checkpoint, save_checkpoint, ParamStore};
use ehoir_core::pipeline::train::{index_features, infer_frame};
use ehoir_core::pipeline::{restore_detector, train as train_detector, Detector, ModelShape, TrainConfig};
use ehoir_core::scenes::{generate, load_features, save_features, FrameFeatures, SceneConfig};

use crate::{EvalArgs, GenArgs, GradcheckArgs, InferArgs, TrainArgs, TrainOverrides};

pub const SEED_ENV: &str = "EHOIR_SEED";
pub const DATASET_FILE: &str = "dataset.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const BUCKETS_CSV: &str = "buckets.csv";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}` is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

/// Reads a config file, reporting whether it names a seed.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, bool)> {
    let Some(path) = path else {
        return Ok((T::default(), false));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let has_seed = value.get("seed").is_some();
    let cfg = serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))?;
    Ok((cfg, has_seed))
}

fn resolve_seed(flag: Option<u64>, from_file: bool, current: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if from_file {
        return Ok(current);
    }
    Ok(env_seed()?.unwrap_or(current))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

pub fn gen(a: GenArgs) -> Result<ExitCode> {
    let (mut cfg, has_seed): (SceneConfig, bool) = read_config(a.config.as_deref())?;
    cfg.seed = resolve_seed(a.seed, has_seed, cfg.seed)?;
    if let Some(v) = a.n_frames {
        cfg.n_frames = v;
    }
    if let Some(v) = a.n_verbs {
        cfg.n_verbs = v;
    }
    if let Some(v) = a.n_objects {
        cfg.n_objects = v;
    }
    if let Some(v) = a.noise_std {
        cfg.noise_std = v;
    }
    let (dataset, features) = generate(&cfg)?;
    create_dir(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    write_dataset(&dataset, &a.out.join(DATASET_FILE))?;
    save_features(&features, &a.out.join(FEATURES_FILE))?;
    let count = |frames: &[FrameAnnotation]| frames.iter().map(|f| f.instances.len()).sum::<usize>();
    println!(
        "frames: {} train, {} test; instances: {} train, {} test; verbs {}, objects {}",
        dataset.train.len(),
        dataset.test.len(),
        count(&dataset.train),
        count(&dataset.test),
        dataset.num_verbs(),
        dataset.num_objects()
    );
    Ok(ExitCode::SUCCESS)
}

pub struct LoadedData {
    pub dataset: Dataset,
    pub features: Vec<FrameFeatures>,
}

pub fn load_data(dir: &Path) -> Result<LoadedData> {
    let dataset = parse_dataset(&dir.join(DATASET_FILE)).with_context(|| format!("loading dataset from {}", dir.display()))?;
    let features = load_features(&dir.join(FEATURES_FILE)).with_context(|| format!("loading features from {}", dir.display()))?;
    Ok(LoadedData { dataset, features })
}

/// Config file, then flags.
pub fn train_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let (mut cfg, has_seed): (TrainConfig, bool) = read_config(o.config.as_deref())?;
    cfg.seed = resolve_seed(o.seed, has_seed, cfg.seed)?;
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(spec) = &o.ablation {
        cfg.ablation = cfg.ablation.with_overrides(spec)?;
    }
    if let Some(m) = &o.reference_mode {
        cfg.reference_mode = m.parse()?;
    }
    if let Some(v) = o.k {
        cfg.k = v;
    }
    if let Some(v) = o.eval_every {
        cfg.eval_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Predictions for `frames` in order, computed on `pool`.
pub fn predict_frames(
    pool: &rayon::ThreadPool,
    det: &Detector,
    store: &ParamStore,
    frames: &[FrameAnnotation],
    features: &[FrameFeatures],
    matrix: &CooccurrenceMatrix,
) -> Result<Vec<FramePredictions>> {
    let index = index_features(features);
    pool.install(|| {
        frames
            .par_iter()
            .map(|f| {
                let grid = index
                    .get(f.frame_id.as_str())
                    .with_context(|| format!("no features for frame `{}`", f.frame_id))?;
                Ok(infer_frame(det, store, &f.frame_id, grid, matrix)?)
            })
            .collect()
    })
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::write(dir.join(REPORT_JSON), report.to_json())?;
    fs::write(dir.join(REPORT_TXT), report.to_table())?;
    fs::write(dir.join(BUCKETS_CSV), report.bucket_csv())?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = train_config(&a.overrides)?;
    let pool = thread_pool(a.jobs)?;
    let data = load_data(&a.data)?;
    create_dir(&a.out)?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;

    let mut metrics = std::io::BufWriter::new(fs::File::create(a.out.join(METRICS_FILE))?);
    let mut write_err = None;
    let outcome = train_detector(&data.dataset, &data.features, &cfg, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
        let eval = r
            .eval
            .as_ref()
            .map(|e| format!("  train mAP50 {:.4}  test mAP {:.4}  Top@G {:.4}", e.train_map50, e.test_full_map, e.test_top_g))
            .unwrap_or_default();
        eprintln!("epoch {:>4}  loss {:.4}  grad {:.3}{eval}", r.epoch, r.loss.total, r.grad_norm);
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    metrics.flush()?;
    save_checkpoint(&outcome.store, &a.out.join(CHECKPOINT_FILE))?;

    let preds = predict_frames(
        &pool,
        &outcome.detector,
        &outcome.store,
        &data.dataset.test,
        &data.features,
        &outcome.cooccurrence,
    )?;
    save_predictions(&preds, &a.out.join(PREDICTIONS_FILE))?;
    let report = map_suite(&preds, &data.dataset)?;
    write_report(&a.out, &report)?;
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}

/// Detector and parameters of a finished run.
pub fn load_run(run: &Path, data: &LoadedData) -> Result<(TrainConfig, Detector, ParamStore)> {
    let (cfg, _): (TrainConfig, bool) = read_config(Some(&run.join(CONFIG_FILE)))?;
    cfg.validate()?;
    let shape = ModelShape::from_data(&data.dataset, &data.features)?;
    let checkpoint = load_checkpoint(&run.join(CHECKPOINT_FILE))?;
    let (det, store) = restore_detector(&cfg, shape, &checkpoint)?;
    Ok((cfg, det, store))
}

pub fn infer(a: InferArgs) -> Result<ExitCode> {
    let pool = thread_pool(a.jobs)?;
    let data = load_data(&a.data)?;
    let (_, det, store) = load_run(&a.run, &data)?;
    let frames = match a.split.as_str() {
        "test" => &data.dataset.test,
        "train" => &data.dataset.train,
        other => bail!("--split must be `train` or `test`, got `{other}`"),
    };
    let ds = &data.dataset;
    let matrix = build_cooccurrence(&ds.train, ds.num_verbs(), ds.num_objects())?;
    let preds = predict_frames(&pool, &det, &store, frames, &data.features, &matrix)?;
    let out: PathBuf = a.out.unwrap_or_else(|| a.run.join(PREDICTIONS_FILE));
    save_predictions(&preds, &out)?;
    let n: usize = preds.iter().map(|p| p.preds.len()).sum();
    println!("{} predictions over {} frames -> {}", n, preds.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let dataset = parse_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let preds = load_predictions(&a.pred).with_context(|| format!("loading {}", a.pred.display()))?;
    let report = map_suite(&preds, &dataset)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_report(dir, &report)?;
    }
    print!("{}", report.to_table());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let first = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(1),
    };
    let seeds: Vec<u64> = (first..first + a.seeds.max(1)).collect();
    let mut failed = false;
    if !a.json {
        println!("{:<20}{:>14}  {:<28}{:>8}", "check", "max rel err", "worst element", "status");
    }
    for (name, build) in cases() {
        let mut worst: Option<CheckResult> = None;
        for &seed in &seeds {
            let r = run_case(name, build, seed)?;
            if a.json {
                println!("{}", serde_json::to_string(&r)?);
            }
            if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                worst = Some(r);
            }
        }
        let w = worst.expect("at least one seed");
        failed |= !w.passed();
        if !a.json {
            let status = if w.passed() { "PASS" } else { "FAIL" };
            let at = format!("{} (seed {})", w.worst.as_deref().unwrap_or("-"), w.seed);
            println!("{:<20}{:>14.3e}  {:<28}{:>8}", w.name, w.max_rel_error, at, status);
        }
    }
    if failed {
        eprintln!("gradient check failed: relative error above {SUITE_TOLERANCE:e}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
