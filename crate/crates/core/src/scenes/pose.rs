//! Synthetic 21-joint hand gestures.
//!
//! Joint order: wrist, then thumb, index, middle, ring and little finger,
//! four joints each from knuckle to tip. Each verb curls a fixed subset of
//! fingers, so the gesture identifies the verb.

use rand::Rng;

use super::{keyed_rng, TAG_POSE};
use crate::annotation::{EgoHoiInstance, HandPose, HandSide, NUM_JOINTS};

const WRIST: [f64; 2] = [0.5, 0.92];
// Finger base angles from vertical, degrees (right hand, back view).
const BASE_ANGLE: [f64; 5] = [-70.0, -25.0, -8.0, 10.0, 28.0];
const KNUCKLE_DIST: [f64; 5] = [0.18, 0.32, 0.33, 0.32, 0.3];
const SEGMENTS: [[f64; 3]; 5] = [
    [0.12, 0.1, 0.08],
    [0.15, 0.11, 0.09],
    [0.16, 0.12, 0.09],
    [0.15, 0.11, 0.08],
    [0.12, 0.09, 0.07],
];
const JITTER: f64 = 0.02;

/// Curl in `[0, 1]` of each finger for a verb.
fn curls(verb: usize) -> [f64; 5] {
    let code = (verb * 11 + 5) % 32;
    std::array::from_fn(|f| if code >> f & 1 == 1 { 0.85 } else { 0.1 })
}

/// Canonical right-hand gesture of `verb` in box-relative coordinates.
pub fn verb_gesture(verb: usize) -> [[f64; 2]; NUM_JOINTS] {
    let c = curls(verb);
    let mut joints = [[0.0; 2]; NUM_JOINTS];
    joints[0] = WRIST;
    for f in 0..5 {
        let theta = BASE_ANGLE[f].to_radians();
        let mut p = [
            WRIST[0] + KNUCKLE_DIST[f] * theta.sin(),
            WRIST[1] - KNUCKLE_DIST[f] * theta.cos(),
        ];
        joints[1 + 4 * f] = p;
        // Curling bends successive segments toward the palm and shortens them.
        let bend = if f == 0 { 1.0 } else { -1.0 };
        for k in 0..3 {
            let phi = theta + bend * (k as f64 + 1.0) * c[f] * 50f64.to_radians();
            let len = SEGMENTS[f][k] * (1.0 - 0.5 * c[f]);
            p = [p[0] + len * phi.sin(), p[1] - len * phi.cos()];
            joints[2 + 4 * f + k] = p;
        }
    }
    for j in &mut joints {
        j[0] = j[0].clamp(0.02, 0.98);
        j[1] = j[1].clamp(0.02, 0.98);
    }
    joints
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Ground-truth joints of `side` for an instance, placed inside that
/// hand's box. `None` when the instance does not involve `side`.
pub fn ground_truth_pose(frame_id: &str, instance: &EgoHoiInstance, side: HandSide) -> Option<HandPose> {
    let bbox = instance.hand_box(side)?;
    let mut rng = keyed_rng(fnv1a(frame_id.as_bytes()), side.class_index() as u64, TAG_POSE);
    let joints = verb_gesture(instance.verb_id)
        .iter()
        .map(|&[u, v]| {
            let u = if side == HandSide::Left { 1.0 - u } else { u };
            let u = (u + rng.random_range(-JITTER..JITTER)).clamp(0.0, 1.0);
            let v = (v + rng.random_range(-JITTER..JITTER)).clamp(0.0, 1.0);
            [bbox.x1 + u * bbox.width(), bbox.y1 + v * bbox.height()]
        })
        .collect();
    Some(HandPose::new(joints).expect("gesture has 21 finite joints"))
}
