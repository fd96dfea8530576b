//! JSON dataset files.
//!
//! ```json
//! {"verbs": [..], "objects": [..], "train": [frame], "test": [frame]}
//! frame = {"id": str,
//!          "instances": [{"involvement": "L"|"R"|"LR", "verb": int, "object": int,
//!                         "hand_boxes": [{"side": "L"|"R", "box": [x1,y1,x2,y2]}],
//!                         "object_box": [x1,y1,x2,y2]}],
//!          "poses": {"L": [[x,y] x 21], "R": [[x,y] x 21]}}
//! ```
//!
//! Serialization is canonical: compact JSON, keys in the order above, one
//! trailing newline. Parsing a canonical file and writing it back yields
//! identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BBox, Dataset, EgoHoiInstance, FrameAnnotation, HandBox, HandInvolvement, HandPose, HandSide};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    verbs: Vec<String>,
    objects: Vec<String>,
    train: Vec<FrameFile>,
    test: Vec<FrameFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameFile {
    id: String,
    instances: Vec<InstanceFile>,
    #[serde(default)]
    poses: BTreeMap<HandSide, Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    involvement: HandInvolvement,
    verb: usize,
    object: usize,
    hand_boxes: Vec<HandBoxFile>,
    object_box: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HandBoxFile {
    side: HandSide,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

fn invalid(frame_id: &str, reason: impl Into<String>) -> Error {
    Error::Validation {
        frame_id: frame_id.to_string(),
        reason: reason.into(),
    }
}

fn frame_from_file(f: FrameFile) -> Result<FrameAnnotation> {
    let id = f.id;
    let mut instances = Vec::with_capacity(f.instances.len());
    for (k, inst) in f.instances.into_iter().enumerate() {
        let object_box = BBox::try_from(inst.object_box)
            .map_err(|e| invalid(&id, format!("instance {k} object_box: {e}")))?;
        let mut hands = Vec::with_capacity(inst.hand_boxes.len());
        for hb in inst.hand_boxes {
            let bbox = BBox::try_from(hb.bbox)
                .map_err(|e| invalid(&id, format!("instance {k} {} hand box: {e}", hb.side.code())))?;
            hands.push(HandBox { side: hb.side, bbox });
        }
        let inst = EgoHoiInstance::new(inst.involvement, inst.verb, inst.object, hands, object_box)
            .map_err(|e| invalid(&id, format!("instance {k}: {e}")))?;
        instances.push(inst);
    }
    let mut poses = BTreeMap::new();
    for (side, joints) in f.poses {
        let pose = HandPose::new(joints).map_err(|e| invalid(&id, format!("{} pose: {e}", side.code())))?;
        poses.insert(side, pose);
    }
    Ok(FrameAnnotation {
        frame_id: id,
        instances,
        poses,
    })
}

fn frame_to_file(f: &FrameAnnotation) -> FrameFile {
    FrameFile {
        id: f.frame_id.clone(),
        instances: f
            .instances
            .iter()
            .map(|i| InstanceFile {
                involvement: i.involvement,
                verb: i.verb_id,
                object: i.object_id,
                hand_boxes: i
                    .hand_boxes
                    .iter()
                    .map(|h| HandBoxFile {
                        side: h.side,
                        bbox: h.bbox.to_array(),
                    })
                    .collect(),
                object_box: i.object_box.to_array(),
            })
            .collect(),
        poses: f.poses.iter().map(|(s, p)| (*s, p.joints().to_vec())).collect(),
    }
}

pub fn parse_dataset_str(text: &str) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let train = file.train.into_iter().map(frame_from_file).collect::<Result<Vec<_>>>()?;
    let test = file.test.into_iter().map(frame_from_file).collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        verb_names: file.verbs,
        object_names: file.objects,
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn parse_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset_str(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Canonical JSON text of a dataset.
pub fn serialize_dataset(ds: &Dataset) -> String {
    let file = DatasetFile {
        verbs: ds.verb_names.clone(),
        objects: ds.object_names.clone(),
        train: ds.train.iter().map(frame_to_file).collect(),
        test: ds.test.iter().map(frame_to_file).collect(),
    };
    let mut s = serde_json::to_string(&file).expect("dataset serialization is infallible");
    s.push('\n');
    s
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, serialize_dataset(ds))?;
    Ok(())
}
