//! Per-hand training targets and their bipartite assignment to queries.

use crate::annotation::{BBox, FrameAnnotation, HandPose, HandSide};
use crate::error::Result;
use crate::hgir::HandPrediction;
use crate::numeric::loss::PROB_CLAMP;
use crate::numeric::{giou, hungarian, LossWeights, Tensor};

use super::BaselineOutputs;

/// One supervised hand: a single-hand instance yields one, a two-hand
/// instance yields one per side sharing the verb and object.
#[derive(Clone, Debug, PartialEq)]
pub struct HandTarget {
    pub instance: usize,
    pub side: HandSide,
    pub hand_box: BBox,
    pub verb_id: usize,
    pub object_id: usize,
    pub object_box: BBox,
    pub pose: Option<HandPose>,
}

pub fn decompose_targets(frame: &FrameAnnotation) -> Vec<HandTarget> {
    frame
        .instances
        .iter()
        .enumerate()
        .flat_map(|(k, inst)| {
            inst.hand_boxes.iter().map(move |hb| HandTarget {
                instance: k,
                side: hb.side,
                hand_box: hb.bbox,
                verb_id: inst.verb_id,
                object_id: inst.object_id,
                object_box: inst.object_box,
                pose: frame.poses.get(&hb.side).cloned(),
            })
        })
        .collect()
}

/// `(query, target)` pairs, sorted by query.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    /// Target assigned to each query, if any.
    pub fn by_query(&self, n_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_queries];
        for &(q, t) in &self.pairs {
            out[q] = Some(t);
        }
        out
    }
}

fn box_from_row(row: &[f64]) -> Option<BBox> {
    BBox::from_cxcywh_clamped(row[0], row[1], row[2], row[3])
}

fn l1_cxcywh(row: &[f64], target: &BBox) -> f64 {
    row.iter().zip(target.to_cxcywh()).map(|(a, b)| (a - b).abs()).sum()
}

fn giou_cost(row: &[f64], target: &BBox) -> f64 {
    match box_from_row(row) {
        Some(b) => -giou(&b, target),
        None => 1.0,
    }
}

fn nll(p: f64) -> f64 {
    -p.max(PROB_CLAMP).ln()
}

/// `(N, T)` assignment cost of every query against every target.
pub fn matching_cost(
    outputs: &BaselineOutputs,
    hands: &HandPrediction,
    targets: &[HandTarget],
    weights: &LossWeights,
) -> Tensor {
    let n = hands.len();
    let mut cost = Tensor::zeros(&[n, targets.len()]);
    for q in 0..n {
        let hb = hands.boxes.row(q);
        let ob = outputs.object_boxes.row(q);
        for (t, tg) in targets.iter().enumerate() {
            let l1 = l1_cxcywh(hb, &tg.hand_box) + l1_cxcywh(ob, &tg.object_box);
            let g = giou_cost(hb, &tg.hand_box) + giou_cost(ob, &tg.object_box);
            let classes = nll(hands.class_probs.get(q, tg.side.class_index()))
                + nll(outputs.object_probs.get(q, tg.object_id));
            let verb = nll(outputs.verb_probs.get(q, tg.verb_id));
            let c = weights.lambda_l1 * l1 + weights.lambda_giou * g + weights.lambda_hoc * classes + weights.lambda_ac * verb;
            cost.set(q, t, c);
        }
    }
    cost
}

pub fn match_targets(
    outputs: &BaselineOutputs,
    hands: &HandPrediction,
    targets: &[HandTarget],
    weights: &LossWeights,
) -> Result<MatchResult> {
    if targets.is_empty() || hands.is_empty() {
        return Ok(MatchResult::default());
    }
    let cost = matching_cost(outputs, hands, targets, weights);
    Ok(MatchResult {
        pairs: hungarian(&cost)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{EgoHoiInstance, HandBox, HandInvolvement};
    use std::collections::BTreeMap;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn frame() -> FrameAnnotation {
        let both = EgoHoiInstance::new(
            HandInvolvement::Both,
            1,
            2,
            vec![
                HandBox { side: HandSide::Left, bbox: bb(0.1, 0.1, 0.2, 0.2) },
                HandBox { side: HandSide::Right, bbox: bb(0.6, 0.1, 0.7, 0.2) },
            ],
            bb(0.3, 0.3, 0.5, 0.5),
        )
        .unwrap();
        let pose = HandPose::new(vec![[0.65, 0.15]; 21]).unwrap();
        FrameAnnotation {
            frame_id: "f".into(),
            instances: vec![both],
            poses: BTreeMap::from([(HandSide::Right, pose)]),
        }
    }

    #[test]
    fn both_instance_gives_two_targets() {
        let t = decompose_targets(&frame());
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].verb_id, t[0].object_id), (t[1].verb_id, t[1].object_id));
        assert_eq!(t[0].side, HandSide::Left);
        assert!(t[0].pose.is_none());
        assert!(t[1].pose.is_some());
    }

    #[test]
    fn exact_query_wins() {
        let f = frame();
        let targets = &decompose_targets(&f)[1..];
        let n = 3;
        let mut hand_boxes = Tensor::full(&[n, 4], 0.5);
        let mut object_boxes = Tensor::full(&[n, 4], 0.5);
        hand_boxes.row_mut(2).copy_from_slice(&targets[0].hand_box.to_cxcywh());
        object_boxes.row_mut(2).copy_from_slice(&targets[0].object_box.to_cxcywh());
        let mut class = Tensor::full(&[n, 3], 1.0 / 3.0);
        class.row_mut(2).copy_from_slice(&[0.0, 1.0, 0.0]);
        let hands = HandPrediction::from_tensors(class, hand_boxes);
        let outputs = BaselineOutputs {
            h: Tensor::zeros(&[n, 1]),
            o: Tensor::zeros(&[n, 1]),
            i: Tensor::zeros(&[n, 1]),
            verb_probs: Tensor::full(&[n, 4], 0.5),
            object_probs: Tensor::full(&[n, 4], 0.25),
            object_boxes,
        };
        let m = match_targets(&outputs, &hands, targets, &LossWeights::default()).unwrap();
        assert_eq!(m.pairs, vec![(2, 0)]);
        assert_eq!(m.by_query(3), vec![None, None, Some(0)]);
    }
}
