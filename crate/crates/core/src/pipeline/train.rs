//! Seeded mini-batch SGD over the training split.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss_tape, LossComponents, LossSettings};
use super::targets::{decompose_targets, match_targets};
use super::{init_detector, Detector, ModelShape, TrainConfig};
use crate::annotation::{build_cooccurrence, partition_rare, CooccurrenceMatrix, Dataset, FrameAnnotation, RARE_THRESHOLD};
use crate::error::{Error, Result};
use crate::eval::{evaluate_frames, EvalReport};
use crate::inference::{finalize, FramePredictions};
use crate::numeric::{ParamStore, Tape, Tensor};
use crate::scenes::{keyed_rng, FrameFeatures, TAG_SHUFFLE};

/// Summary metrics recorded after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub train_map50: f64,
    pub train_full_map: f64,
    pub test_full_map: f64,
    pub test_map50: f64,
    pub test_top_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossComponents,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    pub eval: Option<EpochEval>,
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    pub cooccurrence: CooccurrenceMatrix,
}

/// Feature grids indexed by frame id.
pub fn index_features(features: &[FrameFeatures]) -> HashMap<&str, &Tensor> {
    features.iter().map(|f| (f.frame_id.as_str(), &f.grid)).collect()
}

fn grid_of<'a>(index: &HashMap<&str, &'a Tensor>, frame_id: &str) -> Result<&'a Tensor> {
    index
        .get(frame_id)
        .copied()
        .ok_or_else(|| Error::Dataset(format!("no features for frame `{frame_id}`")))
}

/// Final triplets for one frame.
pub fn infer_frame(
    det: &Detector,
    store: &ParamStore,
    frame_id: &str,
    grid: &Tensor,
    matrix: &CooccurrenceMatrix,
) -> Result<FramePredictions> {
    let pass = det.predict(store, grid)?;
    let cfg = &det.config;
    Ok(FramePredictions {
        frame_id: frame_id.to_string(),
        preds: finalize(&pass.outputs, &pass.hands, cfg.score_threshold, matrix, cfg.max_keep),
    })
}

pub fn infer_frames(
    det: &Detector,
    store: &ParamStore,
    frames: &[FrameAnnotation],
    features: &[FrameFeatures],
    matrix: &CooccurrenceMatrix,
) -> Result<Vec<FramePredictions>> {
    let index = index_features(features);
    frames
        .iter()
        .map(|f| infer_frame(det, store, &f.frame_id, grid_of(&index, &f.frame_id)?, matrix))
        .collect()
}

/// Train-split and test-split reports of the current parameters.
pub fn evaluate_model(
    det: &Detector,
    store: &ParamStore,
    dataset: &Dataset,
    features: &[FrameFeatures],
    matrix: &CooccurrenceMatrix,
) -> Result<(EvalReport, EvalReport)> {
    let rare = partition_rare(&dataset.train, &dataset.test, RARE_THRESHOLD);
    let nv = dataset.num_verbs();
    let train_preds = infer_frames(det, store, &dataset.train, features, matrix)?;
    let test_preds = infer_frames(det, store, &dataset.test, features, matrix)?;
    Ok((
        evaluate_frames(&train_preds, &dataset.train, &rare, nv)?,
        evaluate_frames(&test_preds, &dataset.test, &rare, nv)?,
    ))
}

/// Accumulates the loss gradient of one frame into `store`.
fn frame_step(
    det: &Detector,
    store: &mut ParamStore,
    frame: &FrameAnnotation,
    grid: &Tensor,
    settings: &LossSettings,
) -> Result<LossComponents> {
    let mut tape = Tape::new();
    let pass = det.forward(&mut tape, store, grid)?;
    let targets = decompose_targets(frame);
    let m = match_targets(&pass.outputs, &pass.hands, &targets, &settings.weights)?;
    let (root, comp) = total_loss_tape(&mut tape, &pass, &m, &targets, settings)?;
    let grads = tape.backward(root)?;
    tape.accumulate_param_grads(&grads, store);
    Ok(comp)
}

/// Trains a fresh detector. `on_epoch` sees every record as it is made.
pub fn train(
    dataset: &Dataset,
    features: &[FrameFeatures],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let shape = ModelShape::from_data(dataset, features)?;
    let (det, mut store) = init_detector(config, shape)?;
    let matrix = build_cooccurrence(&dataset.train, dataset.num_verbs(), dataset.num_objects())?;
    let index = index_features(features);
    let grids: Vec<&Tensor> = dataset
        .train
        .iter()
        .map(|f| grid_of(&index, &f.frame_id))
        .collect::<Result<_>>()?;
    let settings = LossSettings {
        weights: config.weights,
        focal: config.focal,
        background_weight: config.background_weight,
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = keyed_rng(config.seed, epoch as u64, TAG_SHUFFLE);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut sum = LossComponents::default();
        let mut norm_sum = 0.0;
        let mut steps = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            store.zero_grad();
            for &k in batch {
                let comp = frame_step(&det, &mut store, &dataset.train[k], grids[k], &settings)?;
                if !comp.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step: b,
                        detail: format!("non-finite loss on frame {}: {comp:?}", dataset.train[k].frame_id),
                    });
                }
                sum.add_scaled(&comp, 1.0);
            }
            store.scale_grads(1.0 / batch.len() as f64);
            let norm = store.clip_grad_norm(config.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: b,
                    detail: format!("gradient norm is {norm}"),
                });
            }
            norm_sum += norm;
            steps += 1;
            store.sgd_step(config.lr);
        }
        store.zero_grad();

        let mut loss = LossComponents::default();
        loss.add_scaled(&sum, 1.0 / dataset.train.len().max(1) as f64);
        let due = if config.eval_every == 0 {
            epoch == config.epochs
        } else {
            epoch % config.eval_every == 0 || epoch == config.epochs
        };
        let eval = if due {
            let (tr, te) = evaluate_model(&det, &store, dataset, features, &matrix)?;
            Some(EpochEval {
                train_map50: tr.map50,
                train_full_map: tr.full_map,
                test_full_map: te.full_map,
                test_map50: te.map50,
                test_top_g: te.top_g_accuracy,
            })
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss,
            grad_norm: norm_sum / steps.max(1) as f64,
            eval,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        detector: det,
        store,
        history,
        cooccurrence: matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Ablation;
    use crate::scenes::{generate, SceneConfig};

    fn tiny(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            n_queries: 4,
            d: 8,
            heads: 2,
            ..TrainConfig::default()
        }
    }

    fn data() -> (Dataset, Vec<FrameFeatures>) {
        generate(&SceneConfig {
            n_frames: 10,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_is_initial_checkpoint() {
        let (ds, feats) = data();
        let out = train(&ds, &feats, &tiny(0), |_| {}).unwrap();
        let (_, init) = init_detector(&tiny(0), ModelShape::from_data(&ds, &feats).unwrap()).unwrap();
        assert!(out.history.is_empty());
        for ((_, a), (_, b)) in out.store.iter().zip(init.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn seed_repeatable() {
        let (ds, feats) = data();
        for ab in [Ablation::default(), Ablation::baseline()] {
            let cfg = TrainConfig { ablation: ab, ..tiny(2) };
            let a = train(&ds, &feats, &cfg, |_| {}).unwrap();
            let b = train(&ds, &feats, &cfg, |_| {}).unwrap();
            assert_eq!(a.history, b.history);
            assert!(a.history[1].eval.is_some() && a.history[0].eval.is_none());
            for ((_, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
                assert_eq!(x.value, y.value);
            }
        }
    }

    #[test]
    fn missing_features_is_dataset_error() {
        let (ds, feats) = data();
        let err = train(&ds, &feats[1..], &tiny(1), |_| {}).err().unwrap();
        assert!(matches!(err, Error::Dataset(_)));
    }
}
