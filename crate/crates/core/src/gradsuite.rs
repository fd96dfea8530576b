//! Finite-difference checks of every differentiable operation.
//!
//! Each case registers random parameters, builds a scalar by projecting the
//! operation's output onto fixed random weights, and compares the tape
//! gradient with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::annotation::HandSide;
use crate::error::Result;
use crate::hgir::{
    geometric_features_tape, global_geometry_tape, select_proposals, HandReading, Hgir, HgirConfig, ReferenceMode,
};
use crate::numeric::loss::{focal_tape, giou_tape, l1_tape, weighted_cross_entropy_tape};
use crate::numeric::nn::{DecoderLayer, EncoderLayer, Linear, Mlp, MultiHeadAttention};
use crate::numeric::{grad_check, FocalParams, ParamStore, Tape, Tensor, Var};
use crate::pipeline::{Ablation, Detector, ModelShape, TrainConfig};

pub const SUITE_TOLERANCE: f64 = 1e-5;
pub const SUITE_EPS: f64 = crate::numeric::gradcheck::DEFAULT_EPS;
pub const SUITE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= SUITE_TOLERANCE
    }
}

type Objective = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;
type Builder = fn(&mut ParamStore, &mut ChaCha8Rng) -> Result<Objective>;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("sizes agree")
}

/// `sum(out * w)` for a fixed random `w` of the output's shape.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(w.clone().reshape(&shape)?);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn param(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, r: usize, c: usize) -> Result<crate::numeric::ParamId> {
    store.add(name, uniform(rng, r, c, -1.0, 1.0))
}

macro_rules! unary {
    ($op:expr) => {
        |store: &mut ParamStore, rng: &mut ChaCha8Rng| -> Result<Objective> {
            let a = param(store, rng, "a", 3, 4)?;
            let w = uniform(rng, 1, 64, -1.0, 1.0);
            Ok(Box::new(move |tape: &mut Tape, store: &ParamStore| {
                let x = tape.param(store, a);
                #[allow(clippy::redundant_closure_call)]
                let out = ($op)(tape, x)?;
                let n = tape.value(out).len();
                project(tape, out, &Tensor::vector(w.data()[..n].to_vec()))
            }))
        }
    };
}

macro_rules! binary {
    ($op:expr, $lo:expr, $hi:expr) => {
        |store: &mut ParamStore, rng: &mut ChaCha8Rng| -> Result<Objective> {
            let a = param(store, rng, "a", 3, 4)?;
            let b = store.add("b", uniform(rng, 3, 4, $lo, $hi))?;
            let w = uniform(rng, 3, 4, -1.0, 1.0);
            Ok(Box::new(move |tape: &mut Tape, store: &ParamStore| {
                let x = tape.param(store, a);
                let y = tape.param(store, b);
                #[allow(clippy::redundant_closure_call)]
                let out = ($op)(tape, x, y)?;
                project(tape, out, &w)
            }))
        }
    };
}

fn matmul_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = param(store, rng, "a", 3, 4)?;
    let b = param(store, rng, "b", 4, 2)?;
    let w = uniform(rng, 3, 2, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        let y = tape.param(store, b);
        let out = tape.matmul(x, y)?;
        project(tape, out, &w)
    }))
}

fn add_row_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = param(store, rng, "a", 3, 4)?;
    let b = param(store, rng, "b", 1, 4)?;
    let w = uniform(rng, 3, 4, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        let y = tape.param(store, b);
        let out = tape.add_row(x, y)?;
        project(tape, out, &w)
    }))
}

fn layer_norm_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = param(store, rng, "x", 3, 5)?;
    let g = store.add("gain", uniform(rng, 1, 5, 0.5, 1.5))?;
    let b = param(store, rng, "bias", 1, 5)?;
    let w = uniform(rng, 3, 5, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        let gv = tape.param(store, g);
        let bv = tape.param(store, b);
        let out = tape.layer_norm(x, gv, bv, 1e-5)?;
        project(tape, out, &w)
    }))
}

fn concat_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = param(store, rng, "a", 3, 2)?;
    let b = param(store, rng, "b", 3, 3)?;
    let c = param(store, rng, "c", 2, 5)?;
    let w = uniform(rng, 5, 5, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        let y = tape.param(store, b);
        let z = tape.param(store, c);
        let wide = tape.concat_cols(&[x, y])?;
        let out = tape.concat_rows(&[wide, z])?;
        project(tape, out, &w)
    }))
}

fn indexing_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = param(store, rng, "a", 4, 5)?;
    let w = uniform(rng, 6, 3, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        let s = tape.slice_cols(x, 1, 4)?;
        let g = tape.gather_rows(s, &[2, 0, 2])?;
        let out = tape.tile_rows(g, 2);
        project(tape, out, &w)
    }))
}

fn l1_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = param(store, rng, "pred", 3, 4)?;
    let t = uniform(rng, 3, 4, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        l1_tape(tape, x, &t)
    }))
}

/// Targets are shifted copies of the predictions: overlapping, never
/// nested along an axis, so no coordinate has a structurally zero gradient.
fn giou_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let n = 4;
    let mut pred = Vec::with_capacity(4 * n);
    let mut target = Vec::with_capacity(4 * n);
    for _ in 0..n {
        let (cx, cy) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
        let (w, h) = (rng.random_range(0.2..0.4), rng.random_range(0.2..0.4));
        pred.extend([cx, cy, w, h]);
        let mut shift = || rng.random_range(0.02..0.05) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (dx, dy) = (shift(), shift());
        let (sw, sh) = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
        target.extend([
            cx + dx - (w + sw) / 2.0,
            cy + dy - (h + sh) / 2.0,
            cx + dx + (w + sw) / 2.0,
            cy + dy + (h + sh) / 2.0,
        ]);
    }
    let a = store.add("pred", Tensor::matrix(n, 4, pred)?)?;
    let t = Tensor::matrix(n, 4, target)?;
    let w = uniform(rng, n, 1, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        let g = giou_tape(tape, x, &t)?;
        project(tape, g, &w)
    }))
}

fn focal_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = store.add("probs", uniform(rng, 4, 3, 0.05, 0.95))?;
    let data = (0..12).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let t = Tensor::matrix(4, 3, data)?;
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        focal_tape(tape, x, &t, FocalParams::default())
    }))
}

fn cross_entropy_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = param(store, rng, "logits", 5, 4)?;
    let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
    let weights: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        weighted_cross_entropy_tape(tape, x, &targets, &weights)
    }))
}

fn linear_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let lin = Linear::new(store, "lin", 5, 3, rng)?;
    let mlp = Mlp::new(store, "mlp", &[3, 6, 2], rng)?;
    let x = uniform(rng, 4, 5, -1.0, 1.0);
    let w = uniform(rng, 4, 2, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let xv = tape.constant(x.clone());
        let h = lin.forward(tape, store, xv)?;
        let out = mlp.forward(tape, store, h)?;
        project(tape, out, &w)
    }))
}

fn attention_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let mha = MultiHeadAttention::new(store, "attn", 8, 2, rng)?;
    let q = uniform(rng, 3, 8, -1.0, 1.0);
    let kv = uniform(rng, 5, 8, -1.0, 1.0);
    let w = uniform(rng, 3, 8, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let qv = tape.constant(q.clone());
        let kvv = tape.constant(kv.clone());
        let out = mha.forward(tape, store, qv, kvv, kvv)?;
        project(tape, out, &w)
    }))
}

fn encoder_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let enc = EncoderLayer::new(store, "enc", 8, 2, rng)?;
    let x = uniform(rng, 4, 8, -1.0, 1.0);
    let w = uniform(rng, 4, 8, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let xv = tape.constant(x.clone());
        let out = enc.forward(tape, store, xv)?;
        project(tape, out, &w)
    }))
}

fn decoder_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let dec = DecoderLayer::new(store, "dec", 8, 2, true, rng)?;
    let x = uniform(rng, 3, 8, -1.0, 1.0);
    let m = uniform(rng, 5, 8, -1.0, 1.0);
    let w = uniform(rng, 3, 8, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let xv = tape.constant(x.clone());
        let mv = tape.constant(m.clone());
        let out = dec.forward(tape, store, xv, mv)?;
        project(tape, out, &w)
    }))
}

fn pose_geometry_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = store.add("pose", uniform(rng, 1, 10, 0.0, 1.0))?;
    let w = uniform(rng, 1, 20, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        let out = geometric_features_tape(tape, x)?;
        project(tape, out, &w)
    }))
}

fn global_geometry_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let a = store.add("candidates", uniform(rng, 4, 8, 0.0, 1.0))?;
    let readings = [
        HandReading { side: Some(HandSide::Left), score: 0.9 },
        HandReading { side: Some(HandSide::Right), score: 0.8 },
        HandReading { side: None, score: 0.7 },
        HandReading { side: Some(HandSide::Right), score: 0.6 },
    ];
    let props = select_proposals(store.value(a), &readings, 0.5, 2);
    let w = uniform(rng, 1, 48, -1.0, 1.0);
    Ok(Box::new(move |tape, store| {
        let x = tape.param(store, a);
        let out = global_geometry_tape(tape, &props, x)?;
        project(tape, out, &w)
    }))
}

fn hgir_case(mode: ReferenceMode) -> impl Fn(&mut ParamStore, &mut ChaCha8Rng) -> Result<Objective> {
    move |store, rng| {
        let cfg = HgirConfig {
            n_queries: 4,
            d: 8,
            n_joints: 3,
            k: 1,
            t_pose: 0.0,
            heads: 2,
            reference_mode: mode,
            ..HgirConfig::default()
        };
        let model = Hgir::new(store, cfg, rng)?;
        let h = uniform(rng, 4, 8, -1.0, 1.0);
        let i = uniform(rng, 4, 8, -1.0, 1.0);
        let we = uniform(rng, 4, 8, -1.0, 1.0);
        let wc = uniform(rng, 4, 6, -1.0, 1.0);
        Ok(Box::new(move |tape: &mut Tape, store: &ParamStore| {
            let hv = tape.constant(h.clone());
            let iv = tape.constant(i.clone());
            let out = model.forward(tape, store, hv, iv)?;
            let a = project(tape, out.e, &we)?;
            let b = project(tape, out.candidates_var, &wc)?;
            tape.add(a, b)
        }) as Objective)
    }
}

fn hgir_top_center(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    hgir_case(ReferenceMode::TopCenter)(store, rng)
}

fn hgir_center(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    hgir_case(ReferenceMode::Center)(store, rng)
}

fn hgir_direct(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    hgir_case(ReferenceMode::Direct)(store, rng)
}

fn hgir_learnable(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    hgir_case(ReferenceMode::Learnable)(store, rng)
}

fn baseline_case(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Objective> {
    let cfg = TrainConfig {
        n_queries: 3,
        d: 8,
        heads: 2,
        ablation: Ablation::baseline(),
        ..TrainConfig::default()
    };
    let shape = ModelShape {
        n_verbs: 3,
        n_objects: 2,
        feature_dim: 6,
    };
    let det = Detector::new(store, cfg, shape, rng)?;
    let grid = uniform(rng, 9, 6, 0.0, 1.0);
    let w: Vec<Tensor> = [(3, 3), (3, 4), (3, 3), (3, 4), (3, 3)]
        .iter()
        .map(|&(r, c)| uniform(rng, r, c, -1.0, 1.0))
        .collect();
    Ok(Box::new(move |tape, store| {
        let pass = det.forward(tape, store, &grid)?;
        let v = &pass.vars;
        let parts = [v.hand_logits, v.hand_boxes, v.object_logits, v.object_boxes, v.verb_probs];
        let mut terms = Vec::with_capacity(parts.len());
        for (p, w) in parts.iter().zip(&w) {
            terms.push(project(tape, *p, w)?);
        }
        tape.add_all(&terms)
    }))
}

/// Every case in the suite, by name.
pub fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", matmul_case),
        ("transpose", unary!(|t: &mut Tape, x| Ok::<_, crate::Error>(t.transpose(x)))),
        ("reshape", unary!(|t: &mut Tape, x| t.reshape(x, &[2, 6]))),
        ("add", binary!(|t: &mut Tape, x, y| t.add(x, y), -1.0, 1.0)),
        ("sub", binary!(|t: &mut Tape, x, y| t.sub(x, y), -1.0, 1.0)),
        ("mul", binary!(|t: &mut Tape, x, y| t.mul(x, y), -1.0, 1.0)),
        ("div", binary!(|t: &mut Tape, x, y| t.div(x, y), 0.5, 1.5)),
        ("maximum", binary!(|t: &mut Tape, x, y| t.maximum(x, y), -1.0, 1.0)),
        ("minimum", binary!(|t: &mut Tape, x, y| t.minimum(x, y), -1.0, 1.0)),
        ("scale", unary!(|t: &mut Tape, x| Ok::<_, crate::Error>(t.scale(x, -1.7)))),
        ("add_scalar", unary!(|t: &mut Tape, x| Ok::<_, crate::Error>(t.add_scalar(x, 0.3)))),
        ("relu", unary!(|t: &mut Tape, x| Ok::<_, crate::Error>(t.relu(x)))),
        ("sigmoid", unary!(|t: &mut Tape, x| Ok::<_, crate::Error>(t.sigmoid(x)))),
        ("abs", unary!(|t: &mut Tape, x| Ok::<_, crate::Error>(t.abs(x)))),
        ("softmax_rows", unary!(|t: &mut Tape, x| Ok::<_, crate::Error>(t.softmax_rows(x)))),
        ("sum", unary!(|t: &mut Tape, x| Ok::<_, crate::Error>(t.sum(x)))),
        ("mean", unary!(|t: &mut Tape, x| Ok::<_, crate::Error>(t.mean(x)))),
        ("add_row", add_row_case),
        ("layer_norm", layer_norm_case),
        ("concat", concat_case),
        ("slice_gather_tile", indexing_case),
        ("l1", l1_case),
        ("giou", giou_case),
        ("focal", focal_case),
        ("cross_entropy", cross_entropy_case),
        ("linear_mlp", linear_case),
        ("attention", attention_case),
        ("encoder_layer", encoder_case),
        ("decoder_layer", decoder_case),
        ("pose_geometry", pose_geometry_case),
        ("global_geometry", global_geometry_case),
        ("hgir_top_center", hgir_top_center),
        ("hgir_center", hgir_center),
        ("hgir_direct", hgir_direct),
        ("hgir_learnable", hgir_learnable),
        ("baseline_forward", baseline_case),
    ]
}

pub fn run_case(name: &'static str, build: Builder, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let objective = build(&mut store, &mut rng)?;
    let report = grad_check(&mut store, SUITE_EPS, |tape, store| objective(tape, store))?;
    Ok(CheckResult {
        name,
        seed,
        max_rel_error: report.max_rel_error,
        worst: report.worst.map(|(p, k)| format!("{p}[{k}]")),
        checked: report.checked,
    })
}

/// Runs every case for every seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, build) in cases() {
        for &seed in seeds {
            out.push(run_case(name, build, seed)?);
        }
    }
    Ok(out)
}
