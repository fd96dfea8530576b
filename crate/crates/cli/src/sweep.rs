use std::fmt::Write as _;
use std::fs;
use std::process::ExitCode;

use anyhow::Result;
use rayon::prelude::*;
use serde::Serialize;

use ehoir_core::eval::map_suite;
use ehoir_core::hgir::ReferenceMode;
use ehoir_core::pipeline::{train, Ablation, TrainConfig};

use crate::commands::{load_data, thread_pool, train_config, LoadedData};
use crate::SweepArgs;

pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_TXT: &str = "sweep.txt";

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub group: &'static str,
    pub label: String,
    pub config: TrainConfig,
    pub full_map: f64,
    pub rare_map: f64,
    pub nonrare_map: f64,
    pub map50: f64,
    pub top_g: f64,
    pub final_loss: f64,
}

/// Component rows, reference-point rows and K rows, each varying one
/// setting of `base`.
pub fn grid(base: &TrainConfig) -> Vec<(&'static str, String, TrainConfig)> {
    let mut rows = Vec::new();
    let components = [
        Ablation::baseline(),
        Ablation { use_hpe: true, use_ir: false, use_hge: false },
        Ablation { use_hpe: true, use_ir: true, use_hge: false },
        Ablation { use_hpe: true, use_ir: false, use_hge: true },
        Ablation::default(),
    ];
    for ab in components {
        rows.push(("components", ab.label(), TrainConfig { ablation: ab, ..base.clone() }));
    }
    let full = TrainConfig { ablation: Ablation::default(), ..base.clone() };
    for mode in [ReferenceMode::Direct, ReferenceMode::Learnable, ReferenceMode::Center, ReferenceMode::TopCenter] {
        rows.push(("reference", format!("{mode:?}"), TrainConfig { reference_mode: mode, ..full.clone() }));
    }
    for k in 1..=4 {
        rows.push(("proposals", format!("K={k}"), TrainConfig { k, ..full.clone() }));
    }
    rows
}

fn run_one(group: &'static str, label: String, cfg: TrainConfig, data: &LoadedData) -> Result<SweepRow> {
    let out = train(&data.dataset, &data.features, &cfg, |_| {})?;
    let preds = ehoir_core::pipeline::train::infer_frames(
        &out.detector,
        &out.store,
        &data.dataset.test,
        &data.features,
        &out.cooccurrence,
    )?;
    let r = map_suite(&preds, &data.dataset)?;
    eprintln!(
        "{} {:?} K={}  mAP {:.4}  Top@G {:.4}",
        cfg.ablation.label(),
        cfg.reference_mode,
        cfg.k,
        r.full_map,
        r.top_g_accuracy
    );
    Ok(SweepRow {
        group,
        label,
        final_loss: out.history.last().map_or(f64::NAN, |h| h.loss.total),
        config: cfg,
        full_map: r.full_map,
        rare_map: r.rare_map,
        nonrare_map: r.nonrare_map,
        map50: r.map50,
        top_g: r.top_g_accuracy,
    })
}

pub fn table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let mut group = "";
    for r in rows {
        if r.group != group {
            group = r.group;
            let _ = writeln!(out, "\n[{group}]");
            let _ = writeln!(out, "{:<18}{:>9}{:>9}{:>10}{:>9}{:>9}", "setting", "Full", "Rare", "Non-rare", "mAP50", "Top@G");
        }
        let p = |x: f64| format!("{:.2}", 100.0 * x);
        let _ = writeln!(
            out,
            "{:<18}{:>9}{:>9}{:>10}{:>9}{:>9}",
            r.label,
            p(r.full_map),
            p(r.rare_map),
            p(r.nonrare_map),
            p(r.map50),
            p(r.top_g)
        );
    }
    out
}

pub fn run(a: SweepArgs) -> Result<ExitCode> {
    let base = train_config(&a.overrides)?;
    let pool = thread_pool(a.jobs)?;
    let data = load_data(&a.data)?;
    let rows = grid(&base);

    let mut unique: Vec<TrainConfig> = Vec::new();
    for (_, _, cfg) in &rows {
        if !unique.contains(cfg) {
            unique.push(cfg.clone());
        }
    }
    let results: Vec<SweepRow> = pool.install(|| {
        unique
            .par_iter()
            .map(|cfg| run_one("", String::new(), cfg.clone(), &data))
            .collect::<Result<_>>()
    })?;
    let table_rows: Vec<SweepRow> = rows
        .into_iter()
        .map(|(group, label, cfg)| {
            let k = unique.iter().position(|u| *u == cfg).expect("listed above");
            SweepRow { group, label, ..results[k].clone() }
        })
        .collect();

    fs::create_dir_all(&a.out)?;
    let mut json = serde_json::to_string_pretty(&table_rows)?;
    json.push('\n');
    fs::write(a.out.join(SWEEP_JSON), json)?;
    let text = table(&table_rows);
    fs::write(a.out.join(SWEEP_TXT), &text)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}
