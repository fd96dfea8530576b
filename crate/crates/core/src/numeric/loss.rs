//! Detection losses: L1, generalized IoU, focal and cross-entropy, each as
//! a plain function over values and as a differentiable tape operation.

use serde::{Deserialize, Serialize};

use super::tape::{sign, Tape, Var};
use super::tensor::{softmax_in_place, Tensor};
use crate::annotation::BBox;
use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_hoc: f64,
    pub lambda_ac: f64,
    pub lambda_pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 2.5,
            lambda_giou: 1.0,
            lambda_hoc: 1.0,
            lambda_ac: 1.0,
            lambda_pose: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_l1: 0.0,
            lambda_giou: 0.0,
            lambda_hoc: 0.0,
            lambda_ac: 0.0,
            lambda_pose: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_l1", self.lambda_l1),
            ("lambda_giou", self.lambda_giou),
            ("lambda_hoc", self.lambda_hoc),
            ("lambda_ac", self.lambda_ac),
            ("lambda_pose", self.lambda_pose),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Focal-loss shape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

// ---- values -------------------------------------------------------------

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l1_loss", pred.shape(), target.shape()));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Generalized IoU of two valid boxes, in `(-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    inter / union - (hull - union) / hull
}

fn focal_term(p: f64, positive: bool, fp: FocalParams) -> (f64, f64) {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let FocalParams { gamma, alpha } = fp;
    if positive {
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * p.ln();
        let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
        let d = alpha * (dq * p.ln() - q.powf(gamma) / p);
        (loss, d)
    } else {
        let q = 1.0 - p;
        let loss = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let dp = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        let d = -(1.0 - alpha) * (dp * q.ln() - p.powf(gamma) / q);
        (loss, d)
    }
}

/// Mean focal loss over all elements of a probability tensor with
/// multi-hot targets (any value above 0.5 counts as positive).
pub fn focal_loss(probs: &Tensor, targets: &Tensor, fp: FocalParams) -> Result<f64> {
    if probs.shape() != targets.shape() {
        return Err(Error::shape("focal_loss", probs.shape(), targets.shape()));
    }
    let n = probs.len().max(1) as f64;
    Ok(probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| focal_term(p, t > 0.5, fp).0)
        .sum::<f64>()
        / n)
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Input(format!("target class {target} out of {} logits", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

// ---- tape ---------------------------------------------------------------

/// Mean absolute difference between a variable and a constant target.
pub fn l1_tape(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let p = tape.value(pred);
    if p.len() != target.len() {
        return Err(Error::shape("l1_tape", p.shape(), target.shape()));
    }
    let n = p.len().max(1) as f64;
    let value = l1_loss(&p.clone().reshape(target.shape())?, target)?;
    let target = target.clone();
    Ok(tape.custom(
        &[pred],
        Tensor::scalar(value),
        Box::new(move |g, xs, _| {
            let s = g.item() / n;
            let mut gx = xs[0].clone();
            for (v, t) in gx.data_mut().iter_mut().zip(target.data()) {
                *v = s * sign(*v - t);
            }
            vec![gx]
        }),
    ))
}

/// Row-wise GIoU between predicted `(n, 4)` cxcywh boxes and constant
/// `(n, 4)` corner-form targets. Returns an `(n, 1)` column.
pub fn giou_tape(tape: &mut Tape, pred_cxcywh: Var, target_xyxy: &Tensor) -> Result<Var> {
    let (n, c) = tape.value(pred_cxcywh).dims2();
    if c != 4 || target_xyxy.dims2() != (n, 4) {
        return Err(Error::shape("giou_tape", tape.shape(pred_cxcywh), target_xyxy.shape()));
    }
    let col = |tape: &mut Tape, i| tape.slice_cols(pred_cxcywh, i, i + 1);
    let cx = col(tape, 0)?;
    let cy = col(tape, 1)?;
    let w = col(tape, 2)?;
    let h = col(tape, 3)?;
    let hw = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let px1 = tape.sub(cx, hw)?;
    let px2 = tape.add(cx, hw)?;
    let py1 = tape.sub(cy, hh)?;
    let py2 = tape.add(cy, hh)?;

    let tcol = |i: usize| Tensor::matrix(n, 1, (0..n).map(|r| target_xyxy.get(r, i)).collect()).unwrap();
    let tx1 = tape.constant(tcol(0));
    let ty1 = tape.constant(tcol(1));
    let tx2 = tape.constant(tcol(2));
    let ty2 = tape.constant(tcol(3));
    let tarea = tape.constant(
        Tensor::matrix(
            n,
            1,
            (0..n)
                .map(|r| (target_xyxy.get(r, 2) - target_xyxy.get(r, 0)) * (target_xyxy.get(r, 3) - target_xyxy.get(r, 1)))
                .collect(),
        )
        .unwrap(),
    );

    let ix1 = tape.maximum(px1, tx1)?;
    let ix2 = tape.minimum(px2, tx2)?;
    let iy1 = tape.maximum(py1, ty1)?;
    let iy2 = tape.minimum(py2, ty2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let parea = tape.mul(w, h)?;
    let union = tape.add(parea, tarea)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let hx1 = tape.minimum(px1, tx1)?;
    let hx2 = tape.maximum(px2, tx2)?;
    let hy1 = tape.minimum(py1, ty1)?;
    let hy2 = tape.maximum(py2, ty2)?;
    let hw = tape.sub(hx2, hx1)?;
    let hh = tape.sub(hy2, hy1)?;
    let hull = tape.mul(hw, hh)?;
    let slack = tape.sub(hull, union)?;
    let penalty = tape.div(slack, hull)?;
    tape.sub(iou, penalty)
}

/// Mean focal loss of a probability variable against constant multi-hot targets.
pub fn focal_tape(tape: &mut Tape, probs: Var, targets: &Tensor, fp: FocalParams) -> Result<Var> {
    let p = tape.value(probs);
    if p.len() != targets.len() {
        return Err(Error::shape("focal_tape", p.shape(), targets.shape()));
    }
    let n = p.len().max(1) as f64;
    let value = p
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &t)| focal_term(p, t > 0.5, fp).0)
        .sum::<f64>()
        / n;
    let targets = targets.clone();
    Ok(tape.custom(
        &[probs],
        Tensor::scalar(value),
        Box::new(move |g, xs, _| {
            let s = g.item() / n;
            let mut gx = xs[0].clone();
            for (v, &t) in gx.data_mut().iter_mut().zip(targets.data()) {
                let clamped = *v <= PROB_CLAMP || *v >= 1.0 - PROB_CLAMP;
                *v = if clamped { 0.0 } else { s * focal_term(*v, t > 0.5, fp).1 };
            }
            vec![gx]
        }),
    ))
}

/// Mean over rows of `-log softmax(logits_row)[target_row]`.
pub fn cross_entropy_tape(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let weights = vec![1.0; targets.len()];
    weighted_cross_entropy_tape(tape, logits, targets, &weights)
}

/// `sum_i w_i CE_i / sum_i w_i` over rows.
pub fn weighted_cross_entropy_tape(tape: &mut Tape, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let (n, c) = tape.value(logits).dims2();
    if targets.len() != n || weights.len() != n {
        return Err(Error::shape("cross_entropy_tape", tape.shape(logits), &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Input(format!("target class {bad} out of {c} logits")));
    }
    let lv = tape.value(logits);
    let mut probs = lv.clone();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        total += weights[i] * cross_entropy(lv.row(i), t)?;
        softmax_in_place(probs.row_mut(i));
    }
    let norm = weights.iter().sum::<f64>();
    let norm = if norm > 0.0 { norm } else { 1.0 };
    let targets = targets.to_vec();
    let weights = weights.to_vec();
    Ok(tape.custom(
        &[logits],
        Tensor::scalar(total / norm),
        Box::new(move |g, _, _| {
            let s = g.item() / norm;
            let mut gx = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                let r = gx.row_mut(i);
                r[t] -= 1.0;
                for v in r.iter_mut() {
                    *v *= s * weights[i];
                }
            }
            vec![gx]
        }),
    ))
}
