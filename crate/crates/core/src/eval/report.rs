use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{average_precision, iou_thresholds, match_frame, top_g_correct, NUM_THRESHOLDS};
use crate::annotation::{
    instance_occlusion, occlusion_bucket, occlusion_ratio, partition_rare, BBox, Dataset, EgoHoiInstance,
    FrameAnnotation, RareSplit, TripletCategory, NUM_OCCLUSION_BUCKETS, RARE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::inference::{FramePredictions, TripletPrediction};

const BUCKET_EDGES: [f64; NUM_OCCLUSION_BUCKETS + 1] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: String,
    pub rare: bool,
    pub n_gt: usize,
    /// One AP per IoU threshold.
    pub ap: Vec<f64>,
    pub mean_ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: usize,
    pub lower: f64,
    pub upper: f64,
    pub n_gt: usize,
    pub n_images: usize,
    pub full_map: f64,
    pub top_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub full_map: f64,
    pub rare_map: f64,
    pub nonrare_map: f64,
    pub map50: f64,
    pub map75: f64,
    pub top_g_accuracy: f64,
    pub n_images: usize,
    pub n_categories: usize,
    pub n_rare: usize,
    pub n_nonrare: usize,
    pub per_bucket: Vec<BucketReport>,
    pub per_category: Vec<CategoryAp>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Bucket of an unmatched prediction: occlusion of its object box by the
/// frame's ground-truth hands and by ground-truth objects it does not
/// itself overlap strongly.
fn pred_bucket(pred: &TripletPrediction, frame: &FrameAnnotation) -> usize {
    let occluders: Vec<BBox> = frame
        .hand_boxes()
        .map(|h| h.bbox)
        .chain(
            frame
                .instances
                .iter()
                .map(|i| i.object_box)
                .filter(|b| pred.object_box.iou(b) <= 0.5),
        )
        .collect();
    occlusion_bucket(occlusion_ratio(&pred.object_box, &occluders))
}

#[derive(Default)]
struct Tally {
    scored: Vec<(f64, bool)>,
    n_gt: usize,
}

/// Scores `preds` against `frames` with the given rare/non-rare split.
/// Frames without an entry in `preds` have no predictions; entries for
/// frames outside `frames` are an input error.
pub fn evaluate_frames(
    preds: &[FramePredictions],
    frames: &[FrameAnnotation],
    rare: &RareSplit,
    n_verbs: usize,
) -> Result<EvalReport> {
    let known: HashSet<&str> = frames.iter().map(|f| f.frame_id.as_str()).collect();
    let mut by_id: HashMap<&str, &[TripletPrediction]> = HashMap::new();
    for f in preds {
        if !known.contains(f.frame_id.as_str()) {
            return Err(Error::Input(format!("prediction for unknown frame `{}`", f.frame_id)));
        }
        if by_id.insert(f.frame_id.as_str(), &f.preds).is_some() {
            return Err(Error::Input(format!("frame `{}` predicted twice", f.frame_id)));
        }
    }

    let thresholds = iou_thresholds();
    // (category, threshold) -> tally, overall and per bucket.
    let mut overall: BTreeMap<(TripletCategory, usize), Tally> = BTreeMap::new();
    let mut bucketed: BTreeMap<(usize, TripletCategory, usize), Tally> = BTreeMap::new();
    let mut bucket_gt = [0usize; NUM_OCCLUSION_BUCKETS];
    let mut bucket_images = [0usize; NUM_OCCLUSION_BUCKETS];
    let mut bucket_correct = [0usize; NUM_OCCLUSION_BUCKETS];
    let mut correct = 0usize;

    for frame in frames {
        let fp: &[TripletPrediction] = by_id.get(frame.frame_id.as_str()).copied().unwrap_or(&[]);
        let gt_bucket: Vec<usize> = (0..frame.instances.len())
            .map(|k| occlusion_bucket(instance_occlusion(frame, k)))
            .collect();
        for &b in &gt_bucket {
            bucket_gt[b] += 1;
        }
        let hit = top_g_correct(fp, frame, n_verbs);
        correct += usize::from(hit);
        if let Some(&b) = gt_bucket.iter().max() {
            bucket_images[b] += 1;
            bucket_correct[b] += usize::from(hit);
        }

        let mut cats: Vec<TripletCategory> = frame
            .instances
            .iter()
            .map(EgoHoiInstance::category)
            .chain(fp.iter().map(TripletPrediction::category))
            .collect();
        cats.sort();
        cats.dedup();
        for cat in cats {
            let mut p: Vec<&TripletPrediction> = fp.iter().filter(|p| p.category() == cat).collect();
            p.sort_by(|a, b| b.score.total_cmp(&a.score));
            let gidx: Vec<usize> = (0..frame.instances.len())
                .filter(|&k| frame.instances[k].category() == cat)
                .collect();
            let g: Vec<&EgoHoiInstance> = gidx.iter().map(|&k| &frame.instances[k]).collect();
            let pb: Vec<usize> = p.iter().map(|q| pred_bucket(q, frame)).collect();
            for (ti, &t) in thresholds.iter().enumerate() {
                let assigned = match_frame(&p, &g, t);
                let tally = overall.entry((cat, ti)).or_default();
                tally.n_gt += g.len();
                for (q, a) in p.iter().zip(&assigned) {
                    tally.scored.push((q.score, a.is_some()));
                }
                for &k in &gidx {
                    bucketed.entry((gt_bucket[k], cat, ti)).or_default().n_gt += 1;
                }
                for (j, (q, a)) in p.iter().zip(&assigned).enumerate() {
                    let b = match a {
                        Some(local) => gt_bucket[gidx[*local]],
                        None => pb[j],
                    };
                    bucketed.entry((b, cat, ti)).or_default().scored.push((q.score, a.is_some()));
                }
            }
        }
    }

    let mut per_category = Vec::new();
    for cat in rare.categories() {
        let aps: Vec<f64> = (0..NUM_THRESHOLDS)
            .map(|ti| {
                overall
                    .get(&(cat, ti))
                    .map_or(0.0, |t| average_precision(&t.scored, t.n_gt))
            })
            .collect();
        let n_gt = overall.get(&(cat, 0)).map_or(0, |t| t.n_gt);
        if n_gt == 0 {
            continue;
        }
        per_category.push(CategoryAp {
            category: cat.label(),
            rare: rare.is_rare(&cat),
            n_gt,
            mean_ap: mean(aps.iter().copied()),
            ap: aps,
        });
    }
    let at = |ti: usize| mean(per_category.iter().map(|c| c.ap[ti]));
    let idx50 = 0;
    let idx75 = 5;

    let per_bucket = (0..NUM_OCCLUSION_BUCKETS)
        .map(|b| {
            let maps = rare.categories().into_iter().filter_map(|cat| {
                let n_gt = bucketed.get(&(b, cat, 0)).map_or(0, |t| t.n_gt);
                (n_gt > 0).then(|| {
                    mean((0..NUM_THRESHOLDS).map(|ti| {
                        bucketed
                            .get(&(b, cat, ti))
                            .map_or(0.0, |t| average_precision(&t.scored, t.n_gt))
                    }))
                })
            });
            BucketReport {
                bucket: b,
                lower: BUCKET_EDGES[b],
                upper: BUCKET_EDGES[b + 1],
                n_gt: bucket_gt[b],
                n_images: bucket_images[b],
                full_map: mean(maps),
                top_g: if bucket_images[b] == 0 {
                    0.0
                } else {
                    bucket_correct[b] as f64 / bucket_images[b] as f64
                },
            }
        })
        .collect();

    Ok(EvalReport {
        full_map: mean(per_category.iter().map(|c| c.mean_ap)),
        rare_map: mean(per_category.iter().filter(|c| c.rare).map(|c| c.mean_ap)),
        nonrare_map: mean(per_category.iter().filter(|c| !c.rare).map(|c| c.mean_ap)),
        map50: at(idx50),
        map75: at(idx75),
        top_g_accuracy: if frames.is_empty() {
            0.0
        } else {
            correct as f64 / frames.len() as f64
        },
        n_images: frames.len(),
        n_categories: per_category.len(),
        n_rare: per_category.iter().filter(|c| c.rare).count(),
        n_nonrare: per_category.iter().filter(|c| !c.rare).count(),
        per_bucket,
        per_category,
    })
}

/// Evaluates test-split predictions of `dataset`.
pub fn map_suite(preds: &[FramePredictions], dataset: &Dataset) -> Result<EvalReport> {
    let rare = partition_rare(&dataset.train, &dataset.test, RARE_THRESHOLD);
    evaluate_frames(preds, &dataset.test, &rare, dataset.num_verbs())
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

impl EvalReport {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned-column summary, values in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let head = ["Full", "Rare", "Non-rare", "mAP50", "mAP75", "Top@G"];
        let vals = [
            self.full_map,
            self.rare_map,
            self.nonrare_map,
            self.map50,
            self.map75,
            self.top_g_accuracy,
        ];
        for h in head {
            let _ = write!(out, "{h:>10}");
        }
        out.push('\n');
        for v in vals {
            let _ = write!(out, "{:>10}", pct(v));
        }
        let _ = writeln!(
            out,
            "\n\nimages {}  categories {} (rare {}, non-rare {})",
            self.n_images, self.n_categories, self.n_rare, self.n_nonrare
        );
        let _ = writeln!(out, "\n{:>12}{:>8}{:>8}{:>10}{:>10}", "occlusion", "GT", "images", "Full", "Top@G");
        for b in &self.per_bucket {
            let range = format!("[{:.1},{:.1}{}", b.lower, b.upper, if b.bucket + 1 == self.per_bucket.len() { "]" } else { ")" });
            let _ = writeln!(
                out,
                "{range:>12}{:>8}{:>8}{:>10}{:>10}",
                b.n_gt,
                b.n_images,
                pct(b.full_map),
                pct(b.top_g)
            );
        }
        out
    }

    /// Per-bucket rows for plotting.
    pub fn bucket_csv(&self) -> String {
        let mut out = String::from("bucket,lower,upper,n_gt,n_images,full_map,top_g\n");
        for b in &self.per_bucket {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                b.bucket, b.lower, b.upper, b.n_gt, b.n_images, b.full_map, b.top_g
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{generate, SceneConfig};

    fn truth_as_predictions(frames: &[FrameAnnotation], n_verbs: usize) -> Vec<FramePredictions> {
        frames
            .iter()
            .map(|f| FramePredictions {
                frame_id: f.frame_id.clone(),
                preds: f
                    .instances
                    .iter()
                    .map(|i| {
                        let mut probs = vec![0.0; n_verbs];
                        probs[i.verb_id] = 1.0;
                        TripletPrediction {
                            involvement: i.involvement,
                            verb_id: i.verb_id,
                            object_id: i.object_id,
                            hand_boxes: i.hand_boxes.clone(),
                            object_box: i.object_box,
                            score: 1.0,
                            verb_probs: probs,
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn perfect_and_empty() {
        let (ds, _) = generate(&SceneConfig {
            n_frames: 40,
            ..SceneConfig::default()
        })
        .unwrap();
        let perfect = map_suite(&truth_as_predictions(&ds.test, 4), &ds).unwrap();
        assert_eq!(perfect.full_map, 1.0);
        assert_eq!(perfect.map50, 1.0);
        assert_eq!(perfect.map75, 1.0);
        assert_eq!(perfect.top_g_accuracy, 1.0);
        let empty = map_suite(&[], &ds).unwrap();
        assert_eq!((empty.full_map, empty.map50, empty.rare_map), (0.0, 0.0, 0.0));
        assert!(empty.to_table().contains("Top@G"));
        assert_eq!(empty.bucket_csv().lines().count(), 6);
    }

    #[test]
    fn unknown_frame_rejected() {
        let (ds, _) = generate(&SceneConfig {
            n_frames: 10,
            ..SceneConfig::default()
        })
        .unwrap();
        let p = vec![FramePredictions {
            frame_id: "nope".into(),
            preds: vec![],
        }];
        assert!(matches!(map_suite(&p, &ds), Err(Error::Input(_))));
    }
}
