//! Frame-level annotation model for egocentric hand-object interactions.
//!
//! An interaction instance ties one or both hands to a verb and an active
//! object, each localized by a box in normalized image coordinates.

mod occlusion;
mod schema;
mod stats;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use occlusion::{instance_occlusion, occlusion_bucket, occlusion_ratio, NUM_OCCLUSION_BUCKETS};
pub use schema::{parse_dataset, parse_dataset_str, serialize_dataset, write_dataset};
pub use stats::{build_cooccurrence, partition_rare, CooccurrenceMatrix, RareSplit, TripletCategory, RARE_THRESHOLD};

/// Number of joints in a hand pose.
pub const NUM_JOINTS: usize = 21;

/// Axis-aligned box given by its top-left and bottom-right corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// A box in normalized image coordinates: `0 <= x1 < x2 <= 1`, same for y.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self::unnormalized(x1, y1, x2, y2)?;
        if [x1, y1, x2, y2].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!("box {:?} leaves the unit square", b.to_array())));
        }
        Ok(b)
    }

    /// A box with positive extent but no range restriction.
    pub fn unnormalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Input("box coordinates must be finite".into()));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Input(format!("degenerate box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// From center, width and height, clamped into the unit square. Returns
    /// `None` when clamping leaves no area.
    pub fn from_cxcywh_clamped(cx: f64, cy: f64, w: f64, h: f64) -> Option<Self> {
        let x1 = (cx - w / 2.0).clamp(0.0, 1.0);
        let x2 = (cx + w / 2.0).clamp(0.0, 1.0);
        let y1 = (cy - h / 2.0).clamp(0.0, 1.0);
        let y2 = (cy + h / 2.0).clamp(0.0, 1.0);
        Self::new(x1, y1, x2, y2).ok()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn to_cxcywh(&self) -> [f64; 4] {
        [
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.x2 - self.x1,
            self.y2 - self.y1,
        ]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        (self.x1..=self.x2).contains(&x) && (self.y1..=self.y2).contains(&y)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HandSide {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

impl HandSide {
    pub const ALL: [HandSide; 2] = [HandSide::Left, HandSide::Right];

    /// Class index used by hand classification heads (background is 2).
    pub fn class_index(self) -> usize {
        match self {
            HandSide::Left => 0,
            HandSide::Right => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            HandSide::Left => HandSide::Right,
            HandSide::Right => HandSide::Left,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            HandSide::Left => "L",
            HandSide::Right => "R",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HandInvolvement {
    #[serde(rename = "R")]
    RightOnly,
    #[serde(rename = "L")]
    LeftOnly,
    #[serde(rename = "LR")]
    Both,
}

impl HandInvolvement {
    pub fn sides(self) -> &'static [HandSide] {
        match self {
            HandInvolvement::RightOnly => &[HandSide::Right],
            HandInvolvement::LeftOnly => &[HandSide::Left],
            HandInvolvement::Both => &[HandSide::Left, HandSide::Right],
        }
    }

    pub fn single(side: HandSide) -> Self {
        match side {
            HandSide::Left => HandInvolvement::LeftOnly,
            HandSide::Right => HandInvolvement::RightOnly,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            HandInvolvement::RightOnly => "R",
            HandInvolvement::LeftOnly => "L",
            HandInvolvement::Both => "LR",
        }
    }
}

/// 21 joints in normalized image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct HandPose {
    joints: Vec<[f64; 2]>,
}

impl HandPose {
    pub fn new(joints: Vec<[f64; 2]>) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(Error::Input(format!("hand pose needs {NUM_JOINTS} joints, got {}", joints.len())));
        }
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("hand pose joints must be finite".into()));
        }
        Ok(Self { joints })
    }

    /// From an interleaved `[x1, y1, x2, y2, ...]` vector.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != 2 * NUM_JOINTS {
            return Err(Error::Input(format!("flat pose needs {} values, got {}", 2 * NUM_JOINTS, flat.len())));
        }
        Self::new(flat.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn joints(&self) -> &[[f64; 2]] {
        &self.joints
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HandBox {
    pub side: HandSide,
    pub bbox: BBox,
}

/// One interaction: the involved hand(s), a verb, and an active object.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoHoiInstance {
    pub involvement: HandInvolvement,
    pub verb_id: usize,
    pub object_id: usize,
    /// One box per involved hand, Left before Right.
    pub hand_boxes: Vec<HandBox>,
    pub object_box: BBox,
}

impl EgoHoiInstance {
    pub fn new(
        involvement: HandInvolvement,
        verb_id: usize,
        object_id: usize,
        mut hand_boxes: Vec<HandBox>,
        object_box: BBox,
    ) -> Result<Self> {
        hand_boxes.sort_by_key(|h| h.side);
        let sides: Vec<HandSide> = hand_boxes.iter().map(|h| h.side).collect();
        if sides.as_slice() != involvement.sides() {
            return Err(Error::Input(format!(
                "involvement {} inconsistent with hand boxes {:?}",
                involvement.code(),
                sides
            )));
        }
        Ok(Self {
            involvement,
            verb_id,
            object_id,
            hand_boxes,
            object_box,
        })
    }

    pub fn hand_box(&self, side: HandSide) -> Option<&BBox> {
        self.hand_boxes.iter().find(|h| h.side == side).map(|h| &h.bbox)
    }

    pub fn category(&self) -> TripletCategory {
        TripletCategory {
            involvement: self.involvement,
            verb_id: self.verb_id,
            object_id: self.object_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameAnnotation {
    pub frame_id: String,
    pub instances: Vec<EgoHoiInstance>,
    pub poses: BTreeMap<HandSide, HandPose>,
}

impl FrameAnnotation {
    /// Every hand box in the frame.
    pub fn hand_boxes(&self) -> impl Iterator<Item = &HandBox> {
        self.instances.iter().flat_map(|i| i.hand_boxes.iter())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub verb_names: Vec<String>,
    pub object_names: Vec<String>,
    pub train: Vec<FrameAnnotation>,
    pub test: Vec<FrameAnnotation>,
}

impl Dataset {
    pub fn num_verbs(&self) -> usize {
        self.verb_names.len()
    }

    pub fn num_objects(&self) -> usize {
        self.object_names.len()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameAnnotation> {
        self.train.iter().chain(&self.test)
    }

    /// Checks vocabulary bounds and frame-id uniqueness across splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in self.frames() {
            if !seen.insert(f.frame_id.as_str()) {
                return Err(Error::Validation {
                    frame_id: f.frame_id.clone(),
                    reason: "duplicate frame id".into(),
                });
            }
            for (k, inst) in f.instances.iter().enumerate() {
                if inst.verb_id >= self.num_verbs() {
                    return Err(Error::Validation {
                        frame_id: f.frame_id.clone(),
                        reason: format!(
                            "instance {k}: verb {} out of range ({} verbs)",
                            inst.verb_id,
                            self.num_verbs()
                        ),
                    });
                }
                if inst.object_id >= self.num_objects() {
                    return Err(Error::Validation {
                        frame_id: f.frame_id.clone(),
                        reason: format!(
                            "instance {k}: object {} out of range ({} objects)",
                            inst.object_id,
                            self.num_objects()
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}
