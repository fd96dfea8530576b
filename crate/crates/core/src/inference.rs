//! From per-query outputs to scored Ego-HOI triplets.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::{BBox, CooccurrenceMatrix, HandBox, HandInvolvement, HandSide, TripletCategory};
use crate::error::{Error, Result};
use crate::hgir::HandPrediction;
use crate::numeric::argmax;
use crate::pipeline::BaselineOutputs;

/// Object boxes of a left and a right prediction must overlap at least
/// this much to merge into one two-hand triplet.
pub const MERGE_IOU: f64 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_MAX_KEEP: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TripletPrediction {
    pub involvement: HandInvolvement,
    pub verb_id: usize,
    pub object_id: usize,
    /// Sorted left before right.
    pub hand_boxes: Vec<HandBox>,
    pub object_box: BBox,
    pub score: f64,
    pub verb_probs: Vec<f64>,
}

impl TripletPrediction {
    pub fn category(&self) -> TripletCategory {
        TripletCategory {
            involvement: self.involvement,
            verb_id: self.verb_id,
            object_id: self.object_id,
        }
    }

    pub fn hand_box(&self, side: HandSide) -> Option<&BBox> {
        self.hand_boxes.iter().find(|h| h.side == side).map(|h| &h.bbox)
    }
}

/// Interaction confidence: product of verb, hand and object scores.
pub fn score(verb: f64, hand: f64, object: f64) -> f64 {
    verb * hand * object
}

/// Drops predictions whose verb-object pair never occurs in training.
pub fn cooccurrence_filter(preds: Vec<TripletPrediction>, matrix: &CooccurrenceMatrix) -> Vec<TripletPrediction> {
    preds
        .into_iter()
        .filter(|p| matrix.get(p.verb_id, p.object_id) > 0)
        .collect()
}

fn query_triplet(outputs: &BaselineOutputs, hands: &HandPrediction, q: usize) -> Option<TripletPrediction> {
    if hands.is_background(q) {
        return None;
    }
    let obj = outputs.object_probs.row(q);
    let n_objects = obj.len() - 1;
    if argmax(obj) == n_objects {
        return None;
    }
    let object_id = argmax(&obj[..n_objects]);
    let verbs = outputs.verb_probs.row(q);
    let verb_id = argmax(verbs);
    let hb = hands.boxes.row(q);
    let ob = outputs.object_boxes.row(q);
    let hand_box = BBox::from_cxcywh_clamped(hb[0], hb[1], hb[2], hb[3])?;
    let object_box = BBox::from_cxcywh_clamped(ob[0], ob[1], ob[2], ob[3])?;
    let side = hands.class_id[q];
    Some(TripletPrediction {
        involvement: HandInvolvement::single(side),
        verb_id,
        object_id,
        hand_boxes: vec![HandBox { side, bbox: hand_box }],
        object_box,
        score: score(verbs[verb_id], hands.score[q], obj[object_id]),
        verb_probs: verbs.to_vec(),
    })
}

/// Greedily pairs left and right predictions that share a verb and object
/// and whose object boxes overlap, in descending score order.
fn merge_two_hand(preds: Vec<TripletPrediction>) -> Vec<TripletPrediction> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut used = vec![false; preds.len()];
    let mut out = Vec::with_capacity(preds.len());
    for &a in &order {
        if used[a] {
            continue;
        }
        used[a] = true;
        let pa = &preds[a];
        let side = pa.hand_boxes[0].side;
        let partner = order.iter().copied().find(|&b| {
            !used[b]
                && preds[b].hand_boxes[0].side == side.other()
                && preds[b].verb_id == pa.verb_id
                && preds[b].object_id == pa.object_id
                && pa.object_box.iou(&preds[b].object_box) >= MERGE_IOU
        });
        match partner {
            Some(b) => {
                used[b] = true;
                let pb = &preds[b];
                let mut hand_boxes = vec![pa.hand_boxes[0], pb.hand_boxes[0]];
                hand_boxes.sort_by_key(|h| h.side);
                out.push(TripletPrediction {
                    involvement: HandInvolvement::Both,
                    verb_id: pa.verb_id,
                    object_id: pa.object_id,
                    hand_boxes,
                    object_box: pa.object_box,
                    score: (pa.score + pb.score) / 2.0,
                    verb_probs: pa.verb_probs.iter().zip(&pb.verb_probs).map(|(x, y)| x.max(*y)).collect(),
                });
            }
            None => out.push(pa.clone()),
        }
    }
    out
}

/// Final triplets of one frame, sorted by descending score (stable).
pub fn finalize(
    outputs: &BaselineOutputs,
    hands: &HandPrediction,
    threshold: f64,
    matrix: &CooccurrenceMatrix,
    max_keep: usize,
) -> Vec<TripletPrediction> {
    let singles: Vec<TripletPrediction> = (0..hands.len())
        .filter_map(|q| query_triplet(outputs, hands, q))
        .filter(|p| p.score >= threshold)
        .collect();
    let singles = cooccurrence_filter(singles, matrix);
    let mut merged = merge_two_hand(singles);
    merged.sort_by(|a, b| b.score.total_cmp(&a.score));
    merged.truncate(max_keep);
    merged
}

/// Predictions of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePredictions {
    pub frame_id: String,
    pub preds: Vec<TripletPrediction>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HandBoxLine {
    side: HandSide,
    #[serde(rename = "box")]
    bbox: BBox,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredLine {
    involvement: HandInvolvement,
    verb: usize,
    object: usize,
    hand_boxes: Vec<HandBoxLine>,
    object_box: BBox,
    score: f64,
    verb_probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameLine {
    id: String,
    preds: Vec<PredLine>,
}

impl From<&TripletPrediction> for PredLine {
    fn from(p: &TripletPrediction) -> Self {
        Self {
            involvement: p.involvement,
            verb: p.verb_id,
            object: p.object_id,
            hand_boxes: p.hand_boxes.iter().map(|h| HandBoxLine { side: h.side, bbox: h.bbox }).collect(),
            object_box: p.object_box,
            score: p.score,
            verb_probs: p.verb_probs.clone(),
        }
    }
}

fn pred_from_line(line: PredLine, frame: &str) -> Result<TripletPrediction> {
    let bad = |reason: String| Error::Validation {
        frame_id: frame.to_string(),
        reason,
    };
    let mut hand_boxes: Vec<HandBox> = line
        .hand_boxes
        .into_iter()
        .map(|h| HandBox { side: h.side, bbox: h.bbox })
        .collect();
    hand_boxes.sort_by_key(|h| h.side);
    let sides: Vec<HandSide> = hand_boxes.iter().map(|h| h.side).collect();
    if sides != line.involvement.sides() {
        return Err(bad(format!("hand boxes {sides:?} do not match involvement {}", line.involvement.code())));
    }
    if !(0.0..=1.0).contains(&line.score) {
        return Err(bad(format!("score {} outside [0, 1]", line.score)));
    }
    Ok(TripletPrediction {
        involvement: line.involvement,
        verb_id: line.verb,
        object_id: line.object,
        hand_boxes,
        object_box: line.object_box,
        score: line.score,
        verb_probs: line.verb_probs,
    })
}

/// One JSON object per frame, one frame per line.
pub fn write_predictions<W: Write>(frames: &[FramePredictions], mut w: W) -> Result<()> {
    for f in frames {
        let line = FrameLine {
            id: f.frame_id.clone(),
            preds: f.preds.iter().map(PredLine::from).collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<FramePredictions>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FrameLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("prediction line {}: {e}", n + 1)))?;
        let preds = f
            .preds
            .into_iter()
            .map(|p| pred_from_line(p, &f.id))
            .collect::<Result<_>>()?;
        out.push(FramePredictions { frame_id: f.id, preds });
    }
    Ok(out)
}

pub fn save_predictions(frames: &[FramePredictions], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_predictions(frames, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<FramePredictions>> {
    let file = std::fs::File::open(path)?;
    read_predictions(std::io::BufReader::new(file))
}
