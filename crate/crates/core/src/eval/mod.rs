//! Triplet-level detection metrics.
//!
//! A prediction is a true positive for a ground-truth instance when the
//! hand involvement, verb and object all agree and the object box and each
//! hand box overlap their ground truth by more than the IoU threshold.
//! Average precision is all-point interpolated and computed per triplet
//! category and threshold over ten thresholds from 0.5 to 0.95.

mod report;

pub use report::{evaluate_frames, map_suite, BucketReport, CategoryAp, EvalReport};

use crate::annotation::{EgoHoiInstance, FrameAnnotation};
use crate::inference::{FramePredictions, TripletPrediction};

pub const NUM_THRESHOLDS: usize = 10;

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Smallest IoU among the object box and every ground-truth hand box, or
/// `None` when a ground-truth hand has no predicted box of its side.
fn binding_iou(pred: &TripletPrediction, gt: &EgoHoiInstance) -> Option<f64> {
    let mut worst = pred.object_box.iou(&gt.object_box);
    for hb in &gt.hand_boxes {
        let p = pred.hand_box(hb.side)?;
        worst = worst.min(p.iou(&hb.bbox));
    }
    Some(worst)
}

pub fn is_true_positive(pred: &TripletPrediction, gt: &EgoHoiInstance, iou_t: f64) -> bool {
    pred.involvement == gt.involvement
        && pred.verb_id == gt.verb_id
        && pred.object_id == gt.object_id
        && binding_iou(pred, gt).is_some_and(|iou| iou > iou_t)
}

/// Greedy matching of score-sorted predictions: each takes the unused
/// ground truth it is a true positive for with the highest binding IoU
/// (ties to the lower index). Returns the matched ground-truth index per
/// prediction.
pub fn match_frame(preds: &[&TripletPrediction], gts: &[&EgoHoiInstance], iou_t: f64) -> Vec<Option<usize>> {
    let mut used = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || !is_true_positive(p, gt, iou_t) {
                    continue;
                }
                let iou = binding_iou(p, gt).unwrap_or(0.0);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            best.map(|(g, _)| {
                used[g] = true;
                g
            })
        })
        .collect()
}

/// All-point interpolated AP of `(score, is_tp)` detections against
/// `n_gt` ground truths. Equal scores rank false positives first.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<(f64, bool)> = scored.to_vec();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (k, &(_, hit)) in order.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Whether the `G` highest pooled verb scores cover the `G` distinct
/// ground-truth verbs of `frame`. Scores are max-pooled over predictions;
/// ties go to the lower verb index. A frame without instances counts as
/// covered.
pub fn top_g_correct(preds: &[TripletPrediction], frame: &FrameAnnotation, n_verbs: usize) -> bool {
    let mut truth: Vec<usize> = frame.instances.iter().map(|i| i.verb_id).collect();
    truth.sort_unstable();
    truth.dedup();
    if truth.is_empty() {
        return true;
    }
    let mut pooled = vec![0.0f64; n_verbs];
    for p in preds {
        for (s, &v) in pooled.iter_mut().zip(&p.verb_probs) {
            *s = s.max(v);
        }
    }
    let mut ranked: Vec<usize> = (0..n_verbs).collect();
    ranked.sort_by(|&a, &b| pooled[b].total_cmp(&pooled[a]).then(a.cmp(&b)));
    let top = &ranked[..truth.len().min(n_verbs)];
    truth.iter().all(|v| top.contains(v))
}

/// Fraction of `frames` whose top-G verbs cover their ground truth.
/// Frames missing from `preds` have no predictions.
pub fn top_g_accuracy(preds: &[FramePredictions], frames: &[FrameAnnotation], n_verbs: usize) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    let by_id: std::collections::HashMap<&str, &[TripletPrediction]> =
        preds.iter().map(|f| (f.frame_id.as_str(), f.preds.as_slice())).collect();
    let correct = frames
        .iter()
        .filter(|f| top_g_correct(by_id.get(f.frame_id.as_str()).copied().unwrap_or(&[]), f, n_verbs))
        .count();
    correct as f64 / frames.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{BBox, HandBox, HandInvolvement, HandSide};

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(inv: HandInvolvement) -> EgoHoiInstance {
        let hands = inv
            .sides()
            .iter()
            .map(|&side| HandBox {
                side,
                bbox: if side == HandSide::Left {
                    bb(0.0, 0.0, 0.2, 0.2)
                } else {
                    bb(0.6, 0.0, 0.8, 0.2)
                },
            })
            .collect();
        EgoHoiInstance::new(inv, 1, 0, hands, bb(0.3, 0.3, 0.5, 0.5)).unwrap()
    }

    fn pred_of(g: &EgoHoiInstance, score: f64) -> TripletPrediction {
        TripletPrediction {
            involvement: g.involvement,
            verb_id: g.verb_id,
            object_id: g.object_id,
            hand_boxes: g.hand_boxes.clone(),
            object_box: g.object_box,
            score,
            verb_probs: vec![0.0, score],
        }
    }

    #[test]
    fn identical_is_tp_everywhere() {
        let g = gt(HandInvolvement::Both);
        let p = pred_of(&g, 0.9);
        assert!(iou_thresholds().iter().all(|&t| is_true_positive(&p, &g, t)));
    }

    #[test]
    fn weak_object_overlap_fails() {
        let g = gt(HandInvolvement::RightOnly);
        let mut p = pred_of(&g, 0.9);
        p.object_box = bb(0.3, 0.3, 0.5, 0.4125);
        assert!((p.object_box.iou(&g.object_box) - 0.5625).abs() < 1e-12);
        assert!(is_true_positive(&p, &g, 0.5));
        p.object_box = bb(0.3, 0.3, 0.5, 0.38);
        assert!(!is_true_positive(&p, &g, 0.5));
    }

    #[test]
    fn involvement_mismatch() {
        let g = gt(HandInvolvement::Both);
        let mut p = pred_of(&gt(HandInvolvement::RightOnly), 0.9);
        p.verb_id = g.verb_id;
        assert!(!is_true_positive(&p, &g, 0.5));
    }

    #[test]
    fn iou_is_strict() {
        let g = gt(HandInvolvement::RightOnly);
        let p = pred_of(&g, 0.9);
        assert!(!is_true_positive(&p, &g, 1.0));
    }

    #[test]
    fn duplicate_becomes_fp() {
        let g = gt(HandInvolvement::RightOnly);
        let a = pred_of(&g, 0.9);
        let b = pred_of(&g, 0.8);
        assert_eq!(match_frame(&[&a, &b], &[&g], 0.5), vec![Some(0), None]);
        assert_eq!(match_frame(&[&a], &[], 0.5), vec![None]);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[(0.9, true)], 1), 1.0);
        assert_eq!(average_precision(&[(0.9, true), (0.8, false)], 1), 1.0);
        assert_eq!(average_precision(&[(0.9, false), (0.8, true)], 1), 0.5);
        assert_eq!(average_precision(&[(0.5, true), (0.5, false)], 1), 0.5);
        assert_eq!(average_precision(&[], 0), 0.0);
        assert_eq!(average_precision(&[], 2), 0.0);
    }

    #[test]
    fn top_g_cases() {
        let mut frame = FrameAnnotation {
            frame_id: "f".into(),
            instances: vec![gt(HandInvolvement::RightOnly)],
            poses: Default::default(),
        };
        let mut p = pred_of(&frame.instances[0], 0.9);
        p.verb_probs = vec![0.2, 0.7, 0.1];
        assert!(top_g_correct(std::slice::from_ref(&p), &frame, 3));
        let mut second = gt(HandInvolvement::LeftOnly);
        second.verb_id = 2;
        frame.instances.push(second);
        assert!(!top_g_correct(std::slice::from_ref(&p), &frame, 3));
        p.verb_probs = vec![0.0, 0.7, 0.1];
        assert!(top_g_correct(&[p], &frame, 3));
    }
}
