//! Multi-task set-prediction loss.

use serde::{Deserialize, Serialize};

use super::targets::{HandTarget, MatchResult};
use super::{BaselineOutputs, ForwardPass};
use crate::annotation::{BBox, HandPose};
use crate::error::Result;
use crate::hgir::{pose_loss, pose_loss_tape, HandPrediction, PoseCandidateSet, BACKGROUND_CLASS};
use crate::numeric::loss::{focal_tape, giou_tape, l1_tape, weighted_cross_entropy_tape, PROB_CLAMP};
use crate::numeric::{focal_loss, giou, FocalParams, LossWeights, Tape, Tensor, Var};

/// Unweighted loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l1: f64,
    pub giou: f64,
    pub hand_class: f64,
    pub object_class: f64,
    pub verb: f64,
    pub pose: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda_l1 * self.l1
            + w.lambda_giou * self.giou
            + w.lambda_hoc * (self.object_class + self.hand_class)
            + w.lambda_ac * self.verb
            + w.lambda_pose * self.pose
    }

    pub fn is_finite(&self) -> bool {
        [self.l1, self.giou, self.hand_class, self.object_class, self.verb, self.pose, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &LossComponents, s: f64) {
        self.l1 += s * other.l1;
        self.giou += s * other.giou;
        self.hand_class += s * other.hand_class;
        self.object_class += s * other.object_class;
        self.verb += s * other.verb;
        self.pose += s * other.pose;
        self.total += s * other.total;
    }
}

/// Settings shared by the tape and value forms of the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub background_weight: f64,
}

struct Layout {
    matched: Vec<(usize, usize)>,
    hand_classes: Vec<usize>,
    object_classes: Vec<usize>,
    class_weights: Vec<f64>,
    verb_targets: Tensor,
    hand_cxcywh: Tensor,
    hand_xyxy: Tensor,
    object_cxcywh: Tensor,
    object_xyxy: Tensor,
    poses: Vec<(usize, HandPose)>,
}

fn layout(n: usize, n_verbs: usize, n_objects: usize, m: &MatchResult, targets: &[HandTarget], bg: f64) -> Result<Layout> {
    let by_query = m.by_query(n);
    let mut verb_targets = Tensor::zeros(&[n, n_verbs]);
    let mut hand_classes = vec![BACKGROUND_CLASS; n];
    let mut object_classes = vec![n_objects; n];
    let mut class_weights = vec![bg; n];
    for (q, t) in by_query.iter().enumerate() {
        if let Some(t) = t {
            let tg = &targets[*t];
            hand_classes[q] = tg.side.class_index();
            object_classes[q] = tg.object_id;
            class_weights[q] = 1.0;
            verb_targets.set(q, tg.verb_id, 1.0);
        }
    }
    let rows = |f: &dyn Fn(&HandTarget) -> [f64; 4]| -> Result<Tensor> {
        let r: Vec<Vec<f64>> = m.pairs.iter().map(|&(_, t)| f(&targets[t]).to_vec()).collect();
        if r.is_empty() {
            Ok(Tensor::zeros(&[0, 4]))
        } else {
            Tensor::from_rows(&r)
        }
    };
    Ok(Layout {
        matched: m.pairs.clone(),
        hand_classes,
        object_classes,
        class_weights,
        verb_targets,
        hand_cxcywh: rows(&|t| t.hand_box.to_cxcywh())?,
        hand_xyxy: rows(&|t| t.hand_box.to_array())?,
        object_cxcywh: rows(&|t| t.object_box.to_cxcywh())?,
        object_xyxy: rows(&|t| t.object_box.to_array())?,
        poses: m
            .pairs
            .iter()
            .filter_map(|&(q, t)| targets[t].pose.clone().map(|p| (q, p)))
            .collect(),
    })
}

fn verb_scale(n: usize, n_verbs: usize, matched: usize) -> f64 {
    (n * n_verbs) as f64 / matched.max(1) as f64
}

/// Differentiable loss of one forward pass. Unmatched queries are
/// supervised as background for the hand and object classes.
pub fn total_loss_tape(
    tape: &mut Tape,
    pass: &ForwardPass,
    m: &MatchResult,
    targets: &[HandTarget],
    settings: &LossSettings,
) -> Result<(Var, LossComponents)> {
    let n = pass.hands.len();
    let n_verbs = pass.outputs.verb_probs.cols();
    let n_objects = pass.outputs.object_probs.cols() - 1;
    let lay = layout(n, n_verbs, n_objects, m, targets, settings.background_weight)?;
    let w = &settings.weights;
    let v = &pass.vars;

    let hand_class = weighted_cross_entropy_tape(tape, v.hand_logits, &lay.hand_classes, &lay.class_weights)?;
    let object_class = weighted_cross_entropy_tape(tape, v.object_logits, &lay.object_classes, &lay.class_weights)?;
    let focal = focal_tape(tape, v.verb_probs, &lay.verb_targets, settings.focal)?;
    let verb = tape.scale(focal, verb_scale(n, n_verbs, lay.matched.len()));

    let mut terms = vec![
        tape.scale(hand_class, w.lambda_hoc),
        tape.scale(object_class, w.lambda_hoc),
        tape.scale(verb, w.lambda_ac),
    ];
    let mut comp = LossComponents {
        hand_class: tape.value(hand_class).item(),
        object_class: tape.value(object_class).item(),
        verb: tape.value(verb).item(),
        ..LossComponents::default()
    };

    if !lay.matched.is_empty() {
        let qs: Vec<usize> = lay.matched.iter().map(|&(q, _)| q).collect();
        let hb = tape.gather_rows(v.hand_boxes, &qs)?;
        let ob = tape.gather_rows(v.object_boxes, &qs)?;
        let l1_h = l1_tape(tape, hb, &lay.hand_cxcywh)?;
        let l1_o = l1_tape(tape, ob, &lay.object_cxcywh)?;
        let l1 = tape.add(l1_h, l1_o)?;
        let g_h = giou_tape(tape, hb, &lay.hand_xyxy)?;
        let g_o = giou_tape(tape, ob, &lay.object_xyxy)?;
        let g_h = tape.mean(g_h);
        let g_o = tape.mean(g_o);
        let g = tape.add(g_h, g_o)?;
        let g = tape.scale(g, -1.0);
        let g = tape.add_scalar(g, 2.0);
        comp.l1 = tape.value(l1).item();
        comp.giou = tape.value(g).item();
        terms.push(tape.scale(l1, w.lambda_l1));
        terms.push(tape.scale(g, w.lambda_giou));
    }
    if let (Some(cand), false) = (v.candidates, lay.poses.is_empty()) {
        let p = pose_loss_tape(tape, cand, &lay.poses)?;
        comp.pose = tape.value(p).item();
        terms.push(tape.scale(p, w.lambda_pose));
    }
    let total = tape.add_all(&terms)?;
    comp.total = tape.value(total).item();
    Ok((total, comp))
}

fn weighted_nll(probs: &Tensor, classes: &[usize], weights: &[f64]) -> f64 {
    let num: f64 = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| -weights[i] * probs.get(i, c).max(PROB_CLAMP).ln())
        .sum();
    let den: f64 = weights.iter().sum();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

fn box_terms(pred: &Tensor, qs: &[usize], cxcywh: &Tensor, xyxy: &Tensor) -> (f64, f64) {
    let m = qs.len() as f64;
    let mut l1 = 0.0;
    let mut g = 0.0;
    for (k, &q) in qs.iter().enumerate() {
        let r = pred.row(q);
        l1 += r.iter().zip(cxcywh.row(k)).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let p = BBox::unnormalized(r[0] - r[2] / 2.0, r[1] - r[3] / 2.0, r[0] + r[2] / 2.0, r[1] + r[3] / 2.0);
        let t = xyxy.row(k);
        let t = BBox::unnormalized(t[0], t[1], t[2], t[3]);
        if let (Ok(p), Ok(t)) = (p, t) {
            g += giou(&p, &t);
        }
    }
    (l1 / (4.0 * m), 1.0 - g / m)
}

/// Value-level form of [`total_loss_tape`] computed from probabilities.
pub fn total_loss(
    outputs: &BaselineOutputs,
    hands: &HandPrediction,
    candidates: Option<&PoseCandidateSet>,
    m: &MatchResult,
    targets: &[HandTarget],
    settings: &LossSettings,
) -> Result<LossComponents> {
    let n = hands.len();
    let n_verbs = outputs.verb_probs.cols();
    let n_objects = outputs.object_probs.cols() - 1;
    let lay = layout(n, n_verbs, n_objects, m, targets, settings.background_weight)?;
    let mut comp = LossComponents {
        hand_class: weighted_nll(&hands.class_probs, &lay.hand_classes, &lay.class_weights),
        object_class: weighted_nll(&outputs.object_probs, &lay.object_classes, &lay.class_weights),
        verb: focal_loss(&outputs.verb_probs, &lay.verb_targets, settings.focal)?
            * verb_scale(n, n_verbs, lay.matched.len()),
        ..LossComponents::default()
    };
    if !lay.matched.is_empty() {
        let qs: Vec<usize> = lay.matched.iter().map(|&(q, _)| q).collect();
        let (l1h, gh) = box_terms(&hands.boxes, &qs, &lay.hand_cxcywh, &lay.hand_xyxy);
        let (l1o, go) = box_terms(&outputs.object_boxes, &qs, &lay.object_cxcywh, &lay.object_xyxy);
        comp.l1 = l1h + l1o;
        comp.giou = gh + go;
    }
    if let Some(c) = candidates {
        comp.pose = pose_loss(c, &lay.poses)?;
    }
    comp.total = comp.weighted_total(&settings.weights);
    Ok(comp)
}
