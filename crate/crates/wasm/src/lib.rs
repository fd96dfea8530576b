//! Browser bindings for the interactive demo page.
//!
//! Boxes cross the boundary as flat `[x1, y1, x2, y2, ...]` arrays and poses
//! as flat `[x0, y0, x1, y1, ...]` arrays, all in normalized coordinates.

use wasm_bindgen::prelude::*;

use ehoir_core::annotation::{occlusion_bucket, occlusion_ratio, BBox, NUM_JOINTS};
use ehoir_core::eval::average_precision;
use ehoir_core::hgir::geometric_features;
use ehoir_core::scenes::verb_gesture;

fn boxes(flat: &[f64]) -> Result<Vec<BBox>, JsError> {
    if !flat.len().is_multiple_of(4) {
        return Err(JsError::new("box array length must be a multiple of 4"));
    }
    flat.chunks(4)
        .map(|c| BBox::unnormalized(c[0], c[1], c[2], c[3]).map_err(|e| JsError::new(&e.to_string())))
        .collect()
}

/// Canonical joints of a verb's gesture inside a unit box.
#[wasm_bindgen]
pub fn gesture(verb: usize) -> Vec<f64> {
    verb_gesture(verb).iter().flatten().copied().collect()
}

/// Unit direction of every joint pair, `Ng (Ng - 1)` values.
#[wasm_bindgen]
pub fn pose_geometry(pose: &[f64]) -> Result<Vec<f64>, JsError> {
    if pose.len() != 2 * NUM_JOINTS {
        return Err(JsError::new(&format!("pose needs {} values, got {}", 2 * NUM_JOINTS, pose.len())));
    }
    Ok(geometric_features(pose))
}

/// Fraction of `object` covered by the union of `occluders`.
#[wasm_bindgen]
pub fn occlusion(object: &[f64], occluders: &[f64]) -> Result<f64, JsError> {
    let obj = boxes(object)?;
    let [obj] = obj.as_slice() else {
        return Err(JsError::new("object must be exactly one box"));
    };
    Ok(occlusion_ratio(obj, &boxes(occluders)?))
}

/// Occlusion bucket index 0..=4 of a ratio.
#[wasm_bindgen]
pub fn bucket(ratio: f64) -> usize {
    occlusion_bucket(ratio)
}

/// All-point AP of ranked detections; `hits[i] != 0` marks a true positive.
#[wasm_bindgen]
pub fn ap(scores: &[f64], hits: &[u8], n_gt: usize) -> Result<f64, JsError> {
    if scores.len() != hits.len() {
        return Err(JsError::new("scores and hits differ in length"));
    }
    let scored: Vec<(f64, bool)> = scores.iter().zip(hits).map(|(&s, &h)| (s, h != 0)).collect();
    Ok(average_precision(&scored, n_gt))
}
