//! Acceptance criteria, one line of output each.
//!
//! Runs as a plain binary so every criterion reports even when an earlier
//! one fails. The process exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ehoir_core::annotation::{
    build_cooccurrence, occlusion_bucket, occlusion_ratio, serialize_dataset, BBox, Dataset, EgoHoiInstance,
    FrameAnnotation, HandBox, HandInvolvement, HandSide, TripletCategory, NUM_JOINTS,
};
use ehoir_core::eval::{average_precision, iou_thresholds, map_suite};
use ehoir_core::gradsuite::{run_suite, SUITE_SEEDS, SUITE_TOLERANCE};
use ehoir_core::hgir::{
    geometric_features, global_feature_len, global_geometry, select_proposals, HandReading, ProposalFill,
};
use ehoir_core::inference::{cooccurrence_filter, write_predictions, FramePredictions, TripletPrediction};
use ehoir_core::numeric::{assignment_cost, hungarian, write_checkpoint, Tensor};
use ehoir_core::pipeline::train::{evaluate_model, infer_frames};
use ehoir_core::pipeline::{train, Ablation, TrainConfig};
use ehoir_core::scenes::{generate, write_features, SceneConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1: f64 = rng.random_range(0.0..0.8);
    let y1: f64 = rng.random_range(0.0..0.8);
    let w = rng.random_range(0.05..(1.0 - x1).min(0.5));
    let h = rng.random_range(0.05..(1.0 - y1).min(0.5));
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..2 * NUM_JOINTS).map(|_| rng.random_range(0.0..1.0)).collect()
}

// ---- 1 -------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let results = run_suite(&SUITE_SEEDS).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("suite is non-empty");
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}@{}", r.name, r.seed))
        .collect();
    let detail = format!(
        "{} checks, worst {:.2e} ({}), {secs:.1}s, tolerance {SUITE_TOLERANCE:.0e}{}",
        results.len(),
        worst.max_rel_error,
        worst.name,
        if failed.is_empty() { String::new() } else { format!(", failed {}", failed.join(" ")) }
    );
    check(failed.is_empty() && secs < 60.0, detail)
}

// ---- 2 -------------------------------------------------------------------

fn dimension_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut lens = Vec::new();
    for k in 1..=4 {
        let n_tokens = 6;
        let data: Vec<f64> = (0..n_tokens).flat_map(|_| random_pose(&mut rng)).collect();
        let cands = Tensor::matrix(n_tokens, 2 * NUM_JOINTS, data).unwrap();
        let readings: Vec<HandReading> = (0..n_tokens)
            .map(|i| HandReading {
                side: Some(HandSide::ALL[i % 2]),
                score: rng.random_range(0.0..1.0),
            })
            .collect();
        let props = select_proposals(&cands, &readings, 0.3, k);
        let built = global_geometry(&props).len();
        let law = 2 * k * 21 * 20;
        if built != law || global_feature_len(k, NUM_JOINTS) != law {
            return Err(format!("K={k}: built {built}, law {law}"));
        }
        lens.push(built.to_string());
    }
    Ok(format!("lengths {}", lens.join("/")))
}

// ---- 3 -------------------------------------------------------------------

fn geometry_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut drift: f64 = 0.0;
    for _ in 0..500 {
        let pose = random_pose(&mut rng);
        let base = geometric_features(&pose);
        let (dx, dy) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let s = rng.random_range(0.01..100.0);
        let moved: Vec<f64> = pose
            .chunks(2)
            .flat_map(|p| [s * p[0] + dx, s * p[1] + dy])
            .collect();
        let f = geometric_features(&moved);
        drift = base.iter().zip(&f).fold(drift, |m, (a, b)| m.max((a - b).abs()));
    }
    let coincident = geometric_features(&vec![0.37; 2 * NUM_JOINTS]);
    let mut partial = random_pose(&mut rng);
    partial[2] = partial[0];
    partial[3] = partial[1];
    let pf = geometric_features(&partial);
    let guard = coincident.iter().all(|&v| v == 0.0)
        && pf.iter().all(|v| v.is_finite())
        && pf[0] == 0.0
        && pf[1] == 0.0;
    check(
        drift <= 1e-12 && guard,
        format!("max drift {drift:.2e}, coincident guard {}", if guard { "zeros" } else { "broken" }),
    )
}

// ---- 4 -------------------------------------------------------------------

fn selection_closure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t_pose = 0.5;
    let mut counts = [0usize; 3];
    for trial in 0..10_000 {
        let n = rng.random_range(0..=8);
        let k = rng.random_range(1..=4);
        let cands = Tensor::matrix(n, 4, (0..4 * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let readings: Vec<HandReading> = (0..n)
            .map(|_| HandReading {
                side: match rng.random_range(0..3) {
                    0 => Some(HandSide::Left),
                    1 => Some(HandSide::Right),
                    _ => None,
                },
                score: rng.random_range(0.0..1.0),
            })
            .collect();
        let kept = |side| readings.iter().filter(|r| r.side == Some(side) && r.score >= t_pose).count();
        let (nl, nr) = (kept(HandSide::Left), kept(HandSide::Right));
        let props = select_proposals(&cands, &readings, t_pose, k);
        for (side, own, other) in [(HandSide::Left, nl, nr), (HandSide::Right, nr, nl)] {
            let flags = props.fill_flags(side);
            if flags.len() != k {
                return Err(format!("trial {trial}: {side:?} has {} entries, K={k}", flags.len()));
            }
            let padded = flags.contains(&ProposalFill::Padded);
            let zero = flags.contains(&ProposalFill::Zero);
            if padded != (own < k && own + other > 0) {
                return Err(format!("trial {trial}: {side:?} padding {padded} with own {own}, other {other}, K={k}"));
            }
            if zero != (own + other == 0) {
                return Err(format!("trial {trial}: {side:?} zero fill {zero} with own {own}, other {other}"));
            }
            if zero && !flags.iter().all(|&f| f == ProposalFill::Zero) {
                return Err(format!("trial {trial}: mixed zero fill"));
            }
            counts[usize::from(padded) + 2 * usize::from(zero)] += 1;
        }
    }
    Ok(format!(
        "10000 sets: {} sides own-only, {} padded, {} zero-filled",
        counts[0], counts[1], counts[2]
    ))
}

// ---- 5 -------------------------------------------------------------------

fn brute_force_min(cost: &Tensor) -> f64 {
    let (n, m) = cost.dims2();
    let (rows, cols, flip) = if n <= m { (n, m, false) } else { (m, n, true) };
    let at = |r: usize, c: usize| if flip { cost.get(c, r) } else { cost.get(r, c) };
    fn go(r: usize, rows: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, at: &dyn Fn(usize, usize) -> f64) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(r + 1, rows, used, acc + at(r, c), best, at);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, rows, &mut vec![false; cols], 0.0, &mut best, &at);
    best
}

fn hungarian_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let data: Vec<f64> = (0..n * m).map(|_| f64::from(rng.random_range(0u32..20))).collect();
        let cost = Tensor::matrix(n, m, data).unwrap();
        let pairs = hungarian(&cost).map_err(|e| e.to_string())?;
        let rows: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let cols: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
        let got = assignment_cost(&cost, &pairs);
        let want = brute_force_min(&cost);
        if pairs.len() != n.min(m) || rows.len() != pairs.len() || cols.len() != pairs.len() || got != want {
            return Err(format!("trial {trial} ({n}x{m}): hungarian {got}, brute force {want}"));
        }
    }
    Ok("100 matrices up to 6x6 equal the brute-force minimum".into())
}

// ---- 6 -------------------------------------------------------------------

fn micro_instance(rng: &mut ChaCha8Rng, n_verbs: usize, n_objects: usize) -> EgoHoiInstance {
    let involvement = [HandInvolvement::RightOnly, HandInvolvement::LeftOnly, HandInvolvement::Both][rng.random_range(0..3)];
    let hand_boxes = involvement
        .sides()
        .iter()
        .map(|&side| HandBox { side, bbox: random_box(rng) })
        .collect();
    EgoHoiInstance::new(
        involvement,
        rng.random_range(0..n_verbs),
        rng.random_range(0..n_objects),
        hand_boxes,
        random_box(rng),
    )
    .unwrap()
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let d = 0.04;
    let x1 = (b.x1 + rng.random_range(-d..d)).clamp(0.0, 0.9);
    let y1 = (b.y1 + rng.random_range(-d..d)).clamp(0.0, 0.9);
    let x2 = (b.x2 + rng.random_range(-d..d)).clamp(x1 + 0.01, 1.0);
    let y2 = (b.y2 + rng.random_range(-d..d)).clamp(y1 + 0.01, 1.0);
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn micro_prediction(rng: &mut ChaCha8Rng, gts: &[EgoHoiInstance], n_verbs: usize, n_objects: usize) -> TripletPrediction {
    let mut inst = if !gts.is_empty() && rng.random_bool(0.7) {
        let g = &gts[rng.random_range(0..gts.len())];
        EgoHoiInstance {
            object_box: jitter(rng, &g.object_box),
            hand_boxes: g.hand_boxes.iter().map(|h| HandBox { side: h.side, bbox: jitter(rng, &h.bbox) }).collect(),
            ..g.clone()
        }
    } else {
        micro_instance(rng, n_verbs, n_objects)
    };
    if rng.random_bool(0.15) {
        inst.verb_id = rng.random_range(0..n_verbs);
    }
    let mut verb_probs: Vec<f64> = (0..n_verbs).map(|_| rng.random_range(0.0..1.0)).collect();
    verb_probs[inst.verb_id] = verb_probs[inst.verb_id].max(rng.random_range(0.0..1.0));
    TripletPrediction {
        involvement: inst.involvement,
        verb_id: inst.verb_id,
        object_id: inst.object_id,
        hand_boxes: inst.hand_boxes,
        object_box: inst.object_box,
        score: rng.random_range(0.0..1.0),
        verb_probs,
    }
}

struct Scenario {
    dataset: Dataset,
    preds: Vec<FramePredictions>,
}

fn micro_scenario(rng: &mut ChaCha8Rng, index: usize) -> Scenario {
    let (n_verbs, n_objects) = (2, 2);
    let frame = |id: String, instances: Vec<EgoHoiInstance>| FrameAnnotation {
        frame_id: id,
        instances,
        poses: BTreeMap::new(),
    };
    let mut train = Vec::new();
    if rng.random_bool(0.5) {
        let common = micro_instance(rng, n_verbs, n_objects);
        for k in 0..100 {
            train.push(frame(format!("s{index}_tr{k:03}"), vec![common.clone()]));
        }
    }
    for k in 0..rng.random_range(0..4) {
        train.push(frame(format!("s{index}_tx{k}"), vec![micro_instance(rng, n_verbs, n_objects)]));
    }
    let mut test = Vec::new();
    let mut preds = Vec::new();
    for k in 0..rng.random_range(1..=3) {
        let mut gts: Vec<EgoHoiInstance> = Vec::new();
        for _ in 0..rng.random_range(0..=3) {
            if !train.is_empty() && rng.random_bool(0.4) {
                let src = &train[rng.random_range(0..train.len())].instances[0];
                gts.push(EgoHoiInstance {
                    object_box: jitter(rng, &src.object_box),
                    ..src.clone()
                });
            } else {
                gts.push(micro_instance(rng, n_verbs, n_objects));
            }
        }
        let id = format!("s{index}_te{k}");
        let fp: Vec<TripletPrediction> = (0..rng.random_range(0..=5))
            .map(|_| micro_prediction(rng, &gts, n_verbs, n_objects))
            .collect();
        if rng.random_bool(0.9) {
            preds.push(FramePredictions { frame_id: id.clone(), preds: fp });
        }
        test.push(frame(id, gts));
    }
    Scenario {
        dataset: Dataset {
            verb_names: (0..n_verbs).map(|v| format!("v{v}")).collect(),
            object_names: (0..n_objects).map(|o| format!("o{o}")).collect(),
            train,
            test,
        },
        preds,
    }
}

#[derive(Debug)]
struct OracleReport {
    full: f64,
    rare: f64,
    nonrare: f64,
    map50: f64,
    map75: f64,
    top_g: f64,
}

fn oracle_ap(mut dets: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let prec: Vec<f64> = (0..dets.len())
        .map(|k| dets[..=k].iter().filter(|d| d.1).count() as f64 / (k + 1) as f64)
        .collect();
    let mut total = 0.0;
    for k in 0..dets.len() {
        if dets[k].1 {
            total += prec[k..].iter().copied().fold(0.0, f64::max);
        }
    }
    total / n_gt as f64
}

fn oracle_binding(p: &TripletPrediction, g: &EgoHoiInstance) -> Option<f64> {
    let mut ious = vec![p.object_box.iou(&g.object_box)];
    for hb in &g.hand_boxes {
        let ph = p.hand_boxes.iter().find(|h| h.side == hb.side)?;
        ious.push(ph.bbox.iou(&hb.bbox));
    }
    Some(ious.into_iter().fold(f64::INFINITY, f64::min))
}

fn oracle_eval(s: &Scenario) -> OracleReport {
    let empty: Vec<TripletPrediction> = Vec::new();
    let preds_of = |id: &str| {
        s.preds
            .iter()
            .find(|f| f.frame_id == id)
            .map_or(&empty, |f| &f.preds)
    };
    let mut train_count: BTreeMap<TripletCategory, usize> = BTreeMap::new();
    for i in s.dataset.train.iter().flat_map(|f| &f.instances) {
        *train_count.entry(i.category()).or_default() += 1;
    }
    let cats: BTreeSet<TripletCategory> =
        s.dataset.test.iter().flat_map(|f| &f.instances).map(|i| i.category()).collect();
    let thresholds = iou_thresholds();
    let mut per_cat: Vec<(bool, Vec<f64>)> = Vec::new();
    for &cat in &cats {
        let mut aps = Vec::new();
        for &t in &thresholds {
            let mut dets = Vec::new();
            let mut n_gt = 0;
            for frame in &s.dataset.test {
                let gts: Vec<&EgoHoiInstance> = frame.instances.iter().filter(|i| i.category() == cat).collect();
                n_gt += gts.len();
                let mut ps: Vec<&TripletPrediction> =
                    preds_of(&frame.frame_id).iter().filter(|p| p.category() == cat).collect();
                ps.sort_by(|a, b| b.score.total_cmp(&a.score));
                let mut taken = vec![false; gts.len()];
                for p in ps {
                    let mut pick: Option<(usize, f64)> = None;
                    for (gi, g) in gts.iter().enumerate() {
                        if taken[gi] {
                            continue;
                        }
                        if let Some(iou) = oracle_binding(p, g).filter(|&v| v > t) {
                            if pick.is_none_or(|(_, b)| iou > b) {
                                pick = Some((gi, iou));
                            }
                        }
                    }
                    if let Some((gi, _)) = pick {
                        taken[gi] = true;
                    }
                    dets.push((p.score, pick.is_some()));
                }
            }
            aps.push(oracle_ap(dets, n_gt));
        }
        per_cat.push((train_count.get(&cat).copied().unwrap_or(0) < 100, aps));
    }
    let avg = |xs: Vec<f64>| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let cat_mean = |aps: &Vec<f64>| aps.iter().sum::<f64>() / aps.len() as f64;

    let n_verbs = s.dataset.num_verbs();
    let mut correct = 0;
    for frame in &s.dataset.test {
        let truth: BTreeSet<usize> = frame.instances.iter().map(|i| i.verb_id).collect();
        let mut pooled = vec![0.0f64; n_verbs];
        for p in preds_of(&frame.frame_id) {
            for (s, &v) in pooled.iter_mut().zip(&p.verb_probs) {
                *s = s.max(v);
            }
        }
        let covered = truth.iter().all(|&v| {
            let ahead = (0..n_verbs)
                .filter(|&u| pooled[u] > pooled[v] || (pooled[u] == pooled[v] && u < v))
                .count();
            ahead < truth.len()
        });
        correct += usize::from(covered);
    }
    OracleReport {
        full: avg(per_cat.iter().map(|(_, a)| cat_mean(a)).collect()),
        rare: avg(per_cat.iter().filter(|(r, _)| *r).map(|(_, a)| cat_mean(a)).collect()),
        nonrare: avg(per_cat.iter().filter(|(r, _)| !*r).map(|(_, a)| cat_mean(a)).collect()),
        map50: avg(per_cat.iter().map(|(_, a)| a[0]).collect()),
        map75: avg(per_cat.iter().map(|(_, a)| a[5]).collect()),
        top_g: correct as f64 / s.dataset.test.len() as f64,
    }
}

fn hand_ap_cases() -> Result<(), String> {
    let first = average_precision(&[(0.9, true), (0.8, false)], 1);
    let second = average_precision(&[(0.9, false), (0.8, true)], 1);
    if first != 1.0 || second != 0.5 {
        return Err(format!("hand AP cases gave {first} and {second}"));
    }
    let gt = EgoHoiInstance::new(
        HandInvolvement::RightOnly,
        0,
        1,
        vec![HandBox { side: HandSide::Right, bbox: BBox::new(0.1, 0.1, 0.3, 0.3).unwrap() }],
        BBox::new(0.4, 0.4, 0.7, 0.7).unwrap(),
    )
    .unwrap();
    let exact = TripletPrediction {
        involvement: gt.involvement,
        verb_id: 0,
        object_id: 1,
        hand_boxes: gt.hand_boxes.clone(),
        object_box: gt.object_box,
        score: 0.8,
        verb_probs: vec![0.8, 0.1],
    };
    let wrong = TripletPrediction {
        object_box: BBox::new(0.0, 0.8, 0.1, 0.9).unwrap(),
        score: 0.9,
        ..exact.clone()
    };
    let dataset = |test| Dataset {
        verb_names: vec!["a".into(), "b".into()],
        object_names: vec!["x".into(), "y".into()],
        train: vec![],
        test,
    };
    let frame = FrameAnnotation { frame_id: "f".into(), instances: vec![gt], poses: BTreeMap::new() };
    let ds = dataset(vec![frame]);
    for (preds, want) in [(vec![exact.clone()], 1.0), (vec![wrong, exact], 0.5)] {
        let fp = vec![FramePredictions { frame_id: "f".into(), preds }];
        let r = map_suite(&fp, &ds).map_err(|e| e.to_string())?;
        if r.full_map != want {
            return Err(format!("end-to-end AP {} instead of {want}", r.full_map));
        }
    }
    Ok(())
}

fn eval_oracle() -> Outcome {
    hand_ap_cases()?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut nontrivial = 0;
    for index in 0..50 {
        let s = micro_scenario(&mut rng, index);
        let r = map_suite(&s.preds, &s.dataset).map_err(|e| e.to_string())?;
        let o = oracle_eval(&s);
        let diffs = [
            (r.full_map, o.full),
            (r.rare_map, o.rare),
            (r.nonrare_map, o.nonrare),
            (r.map50, o.map50),
            (r.map75, o.map75),
            (r.top_g_accuracy, o.top_g),
        ];
        let d = diffs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if d > 1e-12 {
            return Err(format!("scenario {index}: report {r:?} oracle {o:?}"));
        }
        worst = worst.max(d);
        nontrivial += usize::from(o.full > 0.0 && o.full < 1.0);
    }
    Ok(format!(
        "50 scenarios, max difference {worst:.1e}, {nontrivial} with mAP strictly inside (0, 1); AP cases 1.0 and 0.5 exact"
    ))
}

// ---- 7 -------------------------------------------------------------------

fn occlusion_monte_carlo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples = 1_000_000;
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let object = random_box(&mut rng);
        let occluders: Vec<BBox> = (0..rng.random_range(0..=4))
            .map(|_| {
                if rng.random_bool(0.7) {
                    jitter(&mut rng, &object)
                } else {
                    random_box(&mut rng)
                }
            })
            .collect();
        let exact = occlusion_ratio(&object, &occluders);
        let mut hits = 0usize;
        for _ in 0..samples {
            let x = rng.random_range(object.x1..object.x2);
            let y = rng.random_range(object.y1..object.y2);
            if occluders.iter().any(|o| o.contains_point(x, y)) {
                hits += 1;
            }
        }
        let mc = hits as f64 / samples as f64;
        if (exact - mc).abs() > 1e-2 {
            return Err(format!("trial {trial}: exact {exact:.5}, Monte Carlo {mc:.5}"));
        }
        worst = worst.max((exact - mc).abs());
    }
    let edges = [(0.0, 0), (0.1999, 0), (0.2, 1), (0.3999, 1), (0.4, 2), (0.6, 3), (0.7999, 3), (0.8, 4), (1.0, 4)];
    for (r, want) in edges {
        if occlusion_bucket(r) != want {
            return Err(format!("ratio {r} went to bucket {}, expected {want}", occlusion_bucket(r)));
        }
    }
    Ok(format!("100 configurations, max |exact - MC| {worst:.2e}; bucket edges 0.2/0.4/0.6/0.8 honored"))
}

// ---- 8 -------------------------------------------------------------------

fn cooccurrence_soundness() -> Outcome {
    let cfg = SceneConfig::default();
    let (ds, _) = generate(&cfg).map_err(|e| e.to_string())?;
    let matrix = build_cooccurrence(&ds.train, ds.num_verbs(), ds.num_objects()).map_err(|e| e.to_string())?;
    let b = BBox::new(0.1, 0.1, 0.2, 0.2).unwrap();
    let (mut kept, mut removed) = (0, 0);
    for v in 0..ds.num_verbs() {
        for o in 0..ds.num_objects() {
            let p = TripletPrediction {
                involvement: HandInvolvement::RightOnly,
                verb_id: v,
                object_id: o,
                hand_boxes: vec![HandBox { side: HandSide::Right, bbox: b }],
                object_box: b,
                score: 0.5,
                verb_probs: vec![0.25; ds.num_verbs()],
            };
            let out = cooccurrence_filter(vec![p], &matrix);
            let count = matrix.get(v, o);
            if (count > 0) != (out.len() == 1) {
                return Err(format!("pair ({v}, {o}) with count {count} kept {}", out.len()));
            }
            if count > 0 {
                kept += 1;
            } else {
                removed += 1;
            }
        }
    }
    check(removed > 0 && kept > 0, format!("{kept} seen pairs kept, {removed} unseen pairs removed"))
}

// ---- 9 -------------------------------------------------------------------

const DIRECTIONAL_EPOCHS: usize = 600;

fn directional_check() -> Outcome {
    let t = Instant::now();
    let (ds, feats) = generate(&SceneConfig::default()).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for ablation in [Ablation::baseline(), Ablation::default()] {
        let cfg = TrainConfig { epochs: DIRECTIONAL_EPOCHS, ablation, ..TrainConfig::default() };
        let out = train(&ds, &feats, &cfg, |_| {}).map_err(|e| e.to_string())?;
        let (tr, te) =
            evaluate_model(&out.detector, &out.store, &ds, &feats, &out.cooccurrence).map_err(|e| e.to_string())?;
        rows.push((tr.map50, te.full_map, te.top_g_accuracy));
    }
    let secs = t.elapsed().as_secs_f64();
    let (base, full) = (rows[0], rows[1]);
    let detail = format!(
        "{DIRECTIONAL_EPOCHS} epochs each; baseline train mAP50 {:.3}, test Full mAP {:.4}, Top@G {:.3}; \
         full HGIR test Full mAP {:.4}, Top@G {:.3}; {secs:.0}s",
        base.0, base.1, base.2, full.1, full.2
    );
    check(full.2 >= base.2 && full.1 >= base.1 && base.0 >= 0.9 && secs < 600.0, detail)
}

// ---- 10 ------------------------------------------------------------------

fn pipeline_bytes() -> Result<Vec<Vec<u8>>, String> {
    let e = |e: ehoir_core::Error| e.to_string();
    let cfg = SceneConfig { n_frames: 30, ..SceneConfig::default() };
    let (ds, feats) = generate(&cfg).map_err(e)?;
    let mut feature_bytes = Vec::new();
    write_features(&feats, &mut feature_bytes).map_err(e)?;
    let tc = TrainConfig { epochs: 3, eval_every: 1, ..TrainConfig::default() };
    let out = train(&ds, &feats, &tc, |_| {}).map_err(e)?;
    let mut ckpt = Vec::new();
    write_checkpoint(&out.store, &mut ckpt).map_err(e)?;
    let history = serde_json::to_vec(&out.history).map_err(|e| e.to_string())?;
    let preds = infer_frames(&out.detector, &out.store, &ds.test, &feats, &out.cooccurrence).map_err(e)?;
    let mut pred_bytes = Vec::new();
    write_predictions(&preds, &mut pred_bytes).map_err(e)?;
    let report = map_suite(&preds, &ds).map_err(e)?;
    Ok(vec![
        serialize_dataset(&ds).into_bytes(),
        feature_bytes,
        ckpt,
        history,
        pred_bytes,
        report.to_json().into_bytes(),
        report.to_table().into_bytes(),
        report.bucket_csv().into_bytes(),
    ])
}

fn determinism() -> Outcome {
    let a = pipeline_bytes()?;
    let b = pipeline_bytes()?;
    let total: usize = a.iter().map(Vec::len).sum();
    check(a == b, format!("{} artifacts, {total} bytes, identical across two runs: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient suite", gradient_suite),
        ("geometry dimension law", dimension_law),
        ("geometry invariances", geometry_invariances),
        ("selection closure", selection_closure),
        ("hungarian optimality", hungarian_optimality),
        ("eval oracle equivalence", eval_oracle),
        ("occlusion ratio", occlusion_monte_carlo),
        ("co-occurrence filter", cooccurrence_soundness),
        ("desk-scale directional check", directional_check),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|n| n != i + 1) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
