//! Deterministic synthetic datasets: annotations plus per-frame feature
//! grids standing in for backbone output.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, frame index, field tag)`, so a frame's content does not depend
//! on how many draws other frames made.
//!
//! Feature rows are structured: each grid cell carries its own center,
//! then an object block (one-hot class and box corners) and one block per
//! hand side (presence, box corners, 21 joint coordinates), filled for
//! every entity whose box overlaps the cell. The verb is never written
//! directly; it shows only through the hand gesture.

mod features_io;
mod pose;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{
    BBox, Dataset, EgoHoiInstance, FrameAnnotation, HandBox, HandInvolvement, HandPose, HandSide, NUM_JOINTS,
};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub use features_io::{load_features, read_features, save_features, write_features, FEATURES_MAGIC, FEATURES_VERSION};
pub use pose::{ground_truth_pose, verb_gesture};

/// Probability that a frame whose first instance uses one hand gets a
/// second instance with the free hand.
pub const SECOND_INSTANCE_PROB: f64 = 0.3;

const TAG_LAYOUT: u64 = 1;
const TAG_NOISE: u64 = 2;
pub(crate) const TAG_POSE: u64 = 3;
pub(crate) const TAG_INIT: u64 = 4;
pub(crate) const TAG_SHUFFLE: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub n_frames: usize,
    pub n_verbs: usize,
    pub n_objects: usize,
    pub p_both_hands: f64,
    pub p_left_only: f64,
    pub grid_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub noise_std: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_frames: 200,
            n_verbs: 4,
            n_objects: 3,
            p_both_hands: 0.082,
            p_left_only: 0.004,
            grid_size: 8,
            feature_dim: FeatureLayout::new(3).width(),
            seed: 42,
            noise_std: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_frames == 0 {
            return bad("n_frames must be at least 1".into());
        }
        if self.n_verbs < 2 {
            return bad("n_verbs must be at least 2 so some verb-object pair never co-occurs".into());
        }
        if self.n_verbs > 32 {
            return bad("at most 32 verbs have distinct gestures".into());
        }
        if self.n_objects == 0 {
            return bad("n_objects must be at least 1".into());
        }
        for (name, p) in [("p_both_hands", self.p_both_hands), ("p_left_only", self.p_left_only)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.p_both_hands + self.p_left_only > 1.0 {
            return bad("p_both_hands + p_left_only must not exceed 1".into());
        }
        if self.grid_size < 4 {
            return bad(format!("grid_size must be at least 4, got {}", self.grid_size));
        }
        let need = FeatureLayout::new(self.n_objects).width();
        if self.feature_dim < need {
            return bad(format!(
                "feature_dim {} is below the {need} structured channels needed for {} objects",
                self.feature_dim, self.n_objects
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad(format!("noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.n_frames * 4 / 5
    }
}

/// Channel offsets of a structured feature row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureLayout {
    pub n_objects: usize,
}

impl FeatureLayout {
    pub const CELL: usize = 0;
    pub const HAND_WIDTH: usize = 1 + 4 + 2 * NUM_JOINTS;

    pub fn new(n_objects: usize) -> Self {
        Self { n_objects }
    }

    pub fn object(&self) -> usize {
        2
    }

    pub fn object_box(&self) -> usize {
        self.object() + self.n_objects
    }

    pub fn hand(&self, side: HandSide) -> usize {
        let base = self.object_box() + 4;
        match side {
            HandSide::Left => base,
            HandSide::Right => base + Self::HAND_WIDTH,
        }
    }

    pub fn width(&self) -> usize {
        self.hand(HandSide::Right) + Self::HAND_WIDTH
    }
}

/// Feature grid of one frame: `grid_size^2` rows of `feature_dim` values.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures {
    pub frame_id: String,
    pub grid: Tensor,
}

/// Whether a verb may be paired with an object. Each object excludes
/// exactly one verb.
pub fn compatible(verb: usize, object: usize, n_verbs: usize) -> bool {
    (verb + object) % n_verbs != n_verbs - 1
}

/// Independent stream for `(seed, index, tag)`.
pub fn keyed_rng(seed: u64, index: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn verb_names(n: usize) -> Vec<String> {
    const BASE: [&str; 8] = ["take", "put", "open", "close", "pour", "cut", "push", "pull"];
    (0..n).map(|i| BASE.get(i).map_or_else(|| format!("verb{i}"), |s| s.to_string())).collect()
}

fn object_names(n: usize) -> Vec<String> {
    const BASE: [&str; 8] = ["cup", "bottle", "drawer", "knife", "bowl", "kettle", "box", "scissors"];
    (0..n).map(|i| BASE.get(i).map_or_else(|| format!("object{i}"), |s| s.to_string())).collect()
}

pub fn frame_id(index: usize) -> String {
    format!("frame_{index:06}")
}

/// Generates the dataset and one feature grid per frame (train frames
/// first, in index order).
pub fn generate(cfg: &SceneConfig) -> Result<(Dataset, Vec<FrameFeatures>)> {
    cfg.validate()?;
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut features = Vec::with_capacity(cfg.n_frames);
    for index in 0..cfg.n_frames {
        let frame = generate_frame(cfg, index)?;
        features.push(render_features(cfg, index, &frame));
        frames.push(frame);
    }
    let test = frames.split_off(cfg.n_train());
    let ds = Dataset {
        verb_names: verb_names(cfg.n_verbs),
        object_names: object_names(cfg.n_objects),
        train: frames,
        test,
    };
    ds.validate()?;
    Ok((ds, features))
}

fn draw_involvement(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> HandInvolvement {
    let u: f64 = rng.random();
    if u < cfg.p_both_hands {
        HandInvolvement::Both
    } else if u < cfg.p_both_hands + cfg.p_left_only {
        HandInvolvement::LeftOnly
    } else {
        HandInvolvement::RightOnly
    }
}

fn generate_frame(cfg: &SceneConfig, index: usize) -> Result<FrameAnnotation> {
    let mut rng = keyed_rng(cfg.seed, index as u64, TAG_LAYOUT);
    let first = draw_involvement(cfg, &mut rng);
    let second = match first {
        HandInvolvement::Both => None,
        single => {
            let free = single.sides()[0].other();
            (rng.random::<f64>() < SECOND_INSTANCE_PROB).then_some(HandInvolvement::single(free))
        }
    };

    // With two instances each hand works in its own half of the image.
    let region = |inv: HandInvolvement| -> (f64, f64) {
        match (second.is_some(), inv) {
            (false, _) => (0.0, 1.0),
            (true, HandInvolvement::LeftOnly) => (0.0, 0.5),
            (true, _) => (0.5, 1.0),
        }
    };

    let id = frame_id(index);
    let mut instances = Vec::new();
    for inv in std::iter::once(first).chain(second) {
        instances.push(place_instance(cfg, &mut rng, inv, region(inv))?);
    }

    let mut poses = std::collections::BTreeMap::new();
    for inst in &instances {
        for hb in &inst.hand_boxes {
            if let Some(p) = ground_truth_pose(&id, inst, hb.side) {
                poses.insert(hb.side, p);
            }
        }
    }
    Ok(FrameAnnotation {
        frame_id: id,
        instances,
        poses,
    })
}

fn place_instance(
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
    involvement: HandInvolvement,
    (rx0, rx1): (f64, f64),
) -> Result<EgoHoiInstance> {
    let object_id = rng.random_range(0..cfg.n_objects);
    let verbs: Vec<usize> = (0..cfg.n_verbs).filter(|&v| compatible(v, object_id, cfg.n_verbs)).collect();
    let verb_id = verbs[rng.random_range(0..verbs.len())];

    let ow = rng.random_range(0.16..0.28);
    let oh = rng.random_range(0.16..0.28);
    let ox1 = rng.random_range(rx0 + 0.03..rx1 - 0.03 - ow);
    let oy1 = rng.random_range(0.2..0.92 - oh);
    let object_box = BBox::new(ox1, oy1, ox1 + ow, oy1 + oh)?;

    let mut hand_boxes = Vec::new();
    for &side in involvement.sides() {
        let hw = rng.random_range(0.12..0.18);
        let hh = rng.random_range(0.14..0.2);
        let inset = rng.random_range(0.3..0.7) * hw;
        let x1 = match side {
            HandSide::Right => object_box.x2 - inset,
            HandSide::Left => object_box.x1 + inset - hw,
        };
        let y1 = object_box.y1 + rng.random_range(0.0..0.6) * oh - 0.3 * hh;
        let x1 = x1.clamp(0.0, 1.0 - hw);
        let y1 = y1.clamp(0.0, 1.0 - hh);
        hand_boxes.push(HandBox {
            side,
            bbox: BBox::new(x1, y1, x1 + hw, y1 + hh)?,
        });
    }
    EgoHoiInstance::new(involvement, verb_id, object_id, hand_boxes, object_box)
}

fn cell_overlaps(b: &BBox, gx: usize, gy: usize, g: usize) -> bool {
    let s = 1.0 / g as f64;
    let (cx1, cy1) = (gx as f64 * s, gy as f64 * s);
    b.x1 < cx1 + s && b.x2 > cx1 && b.y1 < cy1 + s && b.y2 > cy1
}

/// Noise-free structured grid for a frame.
pub fn structured_grid(cfg: &SceneConfig, frame: &FrameAnnotation) -> Tensor {
    let g = cfg.grid_size;
    let layout = FeatureLayout::new(cfg.n_objects);
    let mut grid = Tensor::zeros(&[g * g, cfg.feature_dim]);
    for gy in 0..g {
        for gx in 0..g {
            let row = grid.row_mut(gy * g + gx);
            row[FeatureLayout::CELL] = (gx as f64 + 0.5) / g as f64;
            row[FeatureLayout::CELL + 1] = (gy as f64 + 0.5) / g as f64;
            for inst in &frame.instances {
                if cell_overlaps(&inst.object_box, gx, gy, g) {
                    row[layout.object() + inst.object_id] = 1.0;
                    row[layout.object_box()..layout.object_box() + 4].copy_from_slice(&inst.object_box.to_array());
                }
                for hb in &inst.hand_boxes {
                    if !cell_overlaps(&hb.bbox, gx, gy, g) {
                        continue;
                    }
                    let base = layout.hand(hb.side);
                    row[base] = 1.0;
                    row[base + 1..base + 5].copy_from_slice(&hb.bbox.to_array());
                    if let Some(p) = frame.poses.get(&hb.side) {
                        let b = &hb.bbox;
                        for (j, [x, y]) in p.joints().iter().enumerate() {
                            row[base + 5 + 2 * j] = (x - b.x1) / b.width().max(f64::EPSILON);
                            row[base + 6 + 2 * j] = (y - b.y1) / b.height().max(f64::EPSILON);
                        }
                    }
                }
            }
        }
    }
    grid
}

fn render_features(cfg: &SceneConfig, index: usize, frame: &FrameAnnotation) -> FrameFeatures {
    let mut grid = structured_grid(cfg, frame);
    if cfg.noise_std > 0.0 {
        let mut rng = keyed_rng(cfg.seed, index as u64, TAG_NOISE);
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated noise std");
        for v in grid.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    FrameFeatures {
        frame_id: frame.frame_id.clone(),
        grid,
    }
}

/// Looks up a frame's pose for `side`, if annotated.
pub fn frame_pose(frame: &FrameAnnotation, side: HandSide) -> Option<&HandPose> {
    frame.poses.get(&side)
}
