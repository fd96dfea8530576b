//! Category statistics over training annotations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{FrameAnnotation, HandInvolvement};
use crate::error::{Error, Result};

/// Categories with fewer training instances than this are rare.
pub const RARE_THRESHOLD: usize = 100;

/// A `<hands, verb, object>` category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletCategory {
    pub involvement: HandInvolvement,
    pub verb_id: usize,
    pub object_id: usize,
}

impl TripletCategory {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.involvement.code(), self.verb_id, self.object_id)
    }
}

/// Verb-object instance counts over a training split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    pub n_verbs: usize,
    pub n_objects: usize,
    counts: Vec<u64>,
}

impl CooccurrenceMatrix {
    pub fn zeros(n_verbs: usize, n_objects: usize) -> Self {
        Self {
            n_verbs,
            n_objects,
            counts: vec![0; n_verbs * n_objects],
        }
    }

    pub fn get(&self, verb: usize, object: usize) -> u64 {
        if verb >= self.n_verbs || object >= self.n_objects {
            return 0;
        }
        self.counts[verb * self.n_objects + object]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n_objects.max(1)).map(<[u64]>::to_vec).collect()
    }
}

pub fn build_cooccurrence(train: &[FrameAnnotation], n_verbs: usize, n_objects: usize) -> Result<CooccurrenceMatrix> {
    let mut m = CooccurrenceMatrix::zeros(n_verbs, n_objects);
    for f in train {
        for inst in &f.instances {
            if inst.verb_id >= n_verbs || inst.object_id >= n_objects {
                return Err(Error::Validation {
                    frame_id: f.frame_id.clone(),
                    reason: format!("pair ({}, {}) outside {n_verbs}x{n_objects}", inst.verb_id, inst.object_id),
                });
            }
            m.counts[inst.verb_id * n_objects + inst.object_id] += 1;
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RareSplit {
    pub rare: BTreeSet<TripletCategory>,
    pub non_rare: BTreeSet<TripletCategory>,
    pub train_counts: BTreeMap<TripletCategory, usize>,
}

impl RareSplit {
    pub fn is_rare(&self, c: &TripletCategory) -> bool {
        self.rare.contains(c)
    }

    pub fn categories(&self) -> BTreeSet<TripletCategory> {
        self.rare.union(&self.non_rare).copied().collect()
    }
}

/// Splits every category seen in `train` or `test` by its training count.
pub fn partition_rare(train: &[FrameAnnotation], test: &[FrameAnnotation], threshold: usize) -> RareSplit {
    let mut counts: BTreeMap<TripletCategory, usize> = BTreeMap::new();
    for inst in train.iter().flat_map(|f| &f.instances) {
        *counts.entry(inst.category()).or_default() += 1;
    }
    let universe: BTreeSet<TripletCategory> = train
        .iter()
        .chain(test)
        .flat_map(|f| &f.instances)
        .map(|i| i.category())
        .collect();
    let mut split = RareSplit::default();
    for c in universe {
        if counts.get(&c).copied().unwrap_or(0) < threshold {
            split.rare.insert(c);
        } else {
            split.non_rare.insert(c);
        }
    }
    split.train_counts = counts;
    split
}
