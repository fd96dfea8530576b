use ehoir_core::pipeline::{train, Ablation, TrainConfig};
use ehoir_core::scenes::{generate, SceneConfig};

fn losses(ablation: Ablation) -> Vec<f64> {
    let scene = SceneConfig { n_frames: 40, noise_std: 0.0, ..SceneConfig::default() };
    let (ds, feats) = generate(&scene).unwrap();
    let cfg = TrainConfig { epochs: 5, lr: 1e-2, ablation, ..TrainConfig::default() };
    let out = train(&ds, &feats, &cfg, |_| {}).unwrap();
    out.history.iter().map(|r| r.loss.total).collect()
}

fn upticks(xs: &[f64]) -> usize {
    xs.windows(2).filter(|w| w[1] > w[0]).count()
}

#[test]
fn early_loss_does_not_rise_baseline() {
    let l = losses(Ablation::baseline());
    assert_eq!(l.len(), 5);
    assert!(upticks(&l) <= 1, "{l:?}");
    assert!(l[4] < l[0], "{l:?}");
}

#[test]
fn early_loss_does_not_rise_full() {
    let l = losses(Ablation::default());
    assert!(upticks(&l) <= 1, "{l:?}");
    assert!(l[4] < l[0], "{l:?}");
}

#[test]
fn history_streams_every_epoch() {
    let scene = SceneConfig { n_frames: 10, ..SceneConfig::default() };
    let (ds, feats) = generate(&scene).unwrap();
    let cfg = TrainConfig { epochs: 3, eval_every: 2, ..TrainConfig::default() };
    let mut seen = Vec::new();
    let out = train(&ds, &feats, &cfg, |r| seen.push((r.epoch, r.eval.is_some()))).unwrap();
    assert_eq!(seen, vec![(1, false), (2, true), (3, true)]);
    assert_eq!(out.history.len(), 3);
}
