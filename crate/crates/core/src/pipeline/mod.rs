//! Set-prediction host detector with an optional HGIR block.
//!
//! Learned query embeddings cross-attend to the projected feature grid of a
//! frame. Three parallel branches turn the decoded queries into hand,
//! object and interaction tokens `(H, O, I)`, and per-token heads decode
//! them into hand, object and verb predictions. With HGIR enabled, the
//! hand tokens are routed through [`Hgir`](crate::hgir::Hgir), which then
//! provides the hand predictions and the interaction embedding fed to the
//! verb head.

pub mod loss;
pub mod targets;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use loss::{total_loss, total_loss_tape, LossComponents};
pub use targets::{decompose_targets, match_targets, matching_cost, HandTarget, MatchResult};
pub use train::{train, EpochRecord, TrainOutcome};

use crate::annotation::Dataset;
use crate::error::{Error, Result};
use crate::hgir::{Hgir, HgirConfig, HandPrediction, PoseCandidateSet, ProposalSets, ReferenceMode};
use crate::numeric::nn::{DecoderLayer, Linear, Mlp};
use crate::numeric::{Axis, FocalParams, LossWeights, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scenes::FrameFeatures;

/// HGIR component switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_hpe: bool,
    pub use_ir: bool,
    pub use_hge: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_hpe: true,
            use_ir: true,
            use_hge: true,
        }
    }
}

impl Ablation {
    pub fn baseline() -> Self {
        Self {
            use_hpe: false,
            use_ir: false,
            use_hge: false,
        }
    }

    /// Parses `use_hpe=false,use_ir=true`; unnamed switches keep `self`.
    pub fn with_overrides(mut self, spec: &str) -> Result<Self> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("ablation entry `{part}` is not key=value")))?;
            let value: bool = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("ablation value `{value}` is not true/false")))?;
            match key.trim() {
                "use_hpe" => self.use_hpe = value,
                "use_ir" => self.use_ir = value,
                "use_hge" => self.use_hge = value,
                other => return Err(Error::Config(format!("unknown ablation switch `{other}`"))),
            }
        }
        Ok(self)
    }

    pub fn label(&self) -> String {
        let flag = |b: bool| if b { "+" } else { "-" };
        format!("HPE{} IR{} HGE{}", flag(self.use_hpe), flag(self.use_ir), flag(self.use_hge))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub clip_norm: f64,
    #[serde(rename = "N")]
    pub n_queries: usize,
    pub d: usize,
    pub heads: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T_pose")]
    pub t_pose: f64,
    pub reference_mode: ReferenceMode,
    pub weights: LossWeights,
    pub focal: FocalParams,
    /// Cross-entropy weight of queries supervised as background.
    pub background_weight: f64,
    pub ablation: Ablation,
    pub score_threshold: f64,
    pub max_keep: usize,
    /// Evaluate every this many epochs; 0 evaluates only after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.05,
            seed: 42,
            batch_size: 1,
            clip_norm: 1.0,
            n_queries: 16,
            d: 32,
            heads: 4,
            k: 1,
            t_pose: 0.5,
            reference_mode: ReferenceMode::TopCenter,
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            background_weight: 0.1,
            ablation: Ablation::default(),
            score_threshold: 0.1,
            max_keep: 100,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn hgir_config(&self) -> HgirConfig {
        HgirConfig {
            n_queries: self.n_queries,
            d: self.d,
            k: self.k,
            t_pose: self.t_pose,
            heads: self.heads,
            reference_mode: self.reference_mode,
            use_hpe: self.ablation.use_hpe,
            use_ir: self.ablation.use_ir,
            use_hge: self.ablation.use_hge,
            ..HgirConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return fail(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(0.0..=1.0).contains(&self.background_weight) {
            return fail(format!("background_weight {} outside [0, 1]", self.background_weight));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return fail(format!("score_threshold {} outside [0, 1]", self.score_threshold));
        }
        if self.max_keep == 0 {
            return fail("max_keep must be at least 1".into());
        }
        if !(self.focal.gamma >= 0.0 && (0.0..=1.0).contains(&self.focal.alpha)) {
            return fail(format!("invalid focal parameters {:?}", self.focal));
        }
        self.weights.validate()?;
        self.hgir_config().validate()
    }
}

/// Dataset-dependent sizes of a detector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_verbs: usize,
    pub n_objects: usize,
    pub feature_dim: usize,
}

impl ModelShape {
    pub fn from_data(dataset: &Dataset, features: &[FrameFeatures]) -> Result<Self> {
        let feature_dim = features
            .first()
            .map(|f| f.grid.cols())
            .ok_or_else(|| Error::Dataset("feature file has no frames".into()))?;
        if let Some(bad) = features.iter().find(|f| f.grid.cols() != feature_dim) {
            return Err(Error::Dataset(format!(
                "frame {} has {} feature channels, expected {feature_dim}",
                bad.frame_id,
                bad.grid.cols()
            )));
        }
        Ok(Self {
            n_verbs: dataset.num_verbs(),
            n_objects: dataset.num_objects(),
            feature_dim,
        })
    }
}

/// Per-query host outputs as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutputs {
    pub h: Tensor,
    pub o: Tensor,
    pub i: Tensor,
    /// `(N, |V|)` independent sigmoid probabilities.
    pub verb_probs: Tensor,
    /// `(N, |O| + 1)` softmax, background last.
    pub object_probs: Tensor,
    /// `(N, 4)` normalized cxcywh.
    pub object_boxes: Tensor,
}

/// Tape handles of the quantities the training loss reads.
#[derive(Clone, Copy, Debug)]
pub struct PassVars {
    pub hand_logits: Var,
    pub hand_boxes: Var,
    pub object_logits: Var,
    pub object_boxes: Var,
    pub verb_probs: Var,
    pub candidates: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub vars: PassVars,
    pub outputs: BaselineOutputs,
    pub hands: HandPrediction,
    pub candidates: Option<PoseCandidateSet>,
    pub proposals: Option<ProposalSets>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: TrainConfig,
    pub shape: ModelShape,
    pub input_proj: Linear,
    pub queries: ParamId,
    pub decoder: DecoderLayer,
    pub h_branch: Mlp,
    pub o_branch: Mlp,
    pub i_branch: Mlp,
    pub hand_class: Linear,
    pub hand_box: Mlp,
    pub object_class: Linear,
    pub object_box: Mlp,
    pub verb_head: Linear,
    pub hgir: Option<Hgir>,
}

impl Detector {
    /// Registers every parameter in `store` in a fixed order, so two
    /// detectors built from the same config share parameter names.
    pub fn new<R: Rng>(store: &mut ParamStore, config: TrainConfig, shape: ModelShape, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let n = config.n_queries;
        let input_proj = Linear::new(store, "base.input_proj", shape.feature_dim, d, rng)?;
        let q: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let queries = store.add("base.queries", Tensor::matrix(n, d, q)?)?;
        let decoder = DecoderLayer::new(store, "base.decoder", d, config.heads, true, rng)?;
        let h_branch = Mlp::new(store, "base.h", &[d, d, d], rng)?;
        let o_branch = Mlp::new(store, "base.o", &[d, d, d], rng)?;
        let i_branch = Mlp::new(store, "base.i", &[d, d, d], rng)?;
        let hand_class = Linear::new(store, "base.hand_class", d, crate::hgir::HAND_CLASSES, rng)?;
        let hand_box = Mlp::new(store, "base.hand_box", &[d, d, 4], rng)?;
        let object_class = Linear::new(store, "base.object_class", d, shape.n_objects + 1, rng)?;
        let object_box = Mlp::new(store, "base.object_box", &[d, d, 4], rng)?;
        let verb_head = Linear::new(store, "base.verb_head", d, shape.n_verbs, rng)?;
        let hgir = if config.ablation.use_hpe {
            Some(Hgir::new(store, config.hgir_config(), rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            shape,
            input_proj,
            queries,
            decoder,
            h_branch,
            o_branch,
            i_branch,
            hand_class,
            hand_box,
            object_class,
            object_box,
            verb_head,
            hgir,
        })
    }

    /// Host token streams `(H, O, I)` for one `(cells, channels)` grid.
    pub fn tokens(&self, tape: &mut Tape, store: &ParamStore, grid: &Tensor) -> Result<(Var, Var, Var)> {
        if grid.shape().len() != 2 || grid.cols() != self.shape.feature_dim {
            return Err(Error::shape("baseline_forward", grid.shape(), &[grid.rows(), self.shape.feature_dim]));
        }
        let x = tape.constant(grid.clone());
        let memory = self.input_proj.forward(tape, store, x)?;
        let q = tape.param(store, self.queries);
        let dec = self.decoder.forward(tape, store, q, memory)?;
        let h = self.h_branch.forward(tape, store, dec)?;
        let o = self.o_branch.forward(tape, store, dec)?;
        let i = self.i_branch.forward(tape, store, dec)?;
        Ok((h, o, i))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, grid: &Tensor) -> Result<ForwardPass> {
        let (h, o, i) = self.tokens(tape, store, grid)?;

        let object_logits = self.object_class.forward(tape, store, o)?;
        let raw = self.object_box.forward(tape, store, o)?;
        let object_boxes = tape.sigmoid(raw);

        let (hand_logits, hand_boxes, e, candidates_var, candidates, proposals) = match &self.hgir {
            Some(hgir) => {
                let out = hgir.forward(tape, store, h, i)?;
                (
                    out.hand_logits,
                    out.hand_boxes,
                    out.e,
                    Some(out.candidates_var),
                    Some(out.candidates),
                    Some(out.proposals),
                )
            }
            None => {
                let logits = self.hand_class.forward(tape, store, h)?;
                let raw = self.hand_box.forward(tape, store, h)?;
                let boxes = tape.sigmoid(raw);
                (logits, boxes, i, None, None, None)
            }
        };
        let verb_logits = self.verb_head.forward(tape, store, e)?;
        let verb_probs = tape.sigmoid(verb_logits);

        let hands = HandPrediction::from_tensors(
            tape.value(hand_logits).softmax(Axis::Cols),
            tape.value(hand_boxes).clone(),
        );
        let outputs = BaselineOutputs {
            h: tape.value(h).clone(),
            o: tape.value(o).clone(),
            i: tape.value(i).clone(),
            verb_probs: tape.value(verb_probs).clone(),
            object_probs: tape.value(object_logits).softmax(Axis::Cols),
            object_boxes: tape.value(object_boxes).clone(),
        };
        Ok(ForwardPass {
            vars: PassVars {
                hand_logits,
                hand_boxes,
                object_logits,
                object_boxes,
                verb_probs,
                candidates: candidates_var,
            },
            outputs,
            hands,
            candidates,
            proposals,
        })
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&self, store: &ParamStore, grid: &Tensor) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        self.forward(&mut tape, store, grid)
    }
}

/// Builds a detector and its parameters with the seed from `config`.
pub fn init_detector(config: &TrainConfig, shape: ModelShape) -> Result<(Detector, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = crate::scenes::keyed_rng(config.seed, 0, crate::scenes::TAG_INIT);
    let det = Detector::new(&mut store, config.clone(), shape, &mut rng)?;
    Ok((det, store))
}

/// Rebuilds a detector and loads `checkpoint` values into it.
pub fn restore_detector(config: &TrainConfig, shape: ModelShape, checkpoint: &ParamStore) -> Result<(Detector, ParamStore)> {
    let (det, mut store) = init_detector(config, shape)?;
    store.load_values(checkpoint)?;
    Ok((det, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ModelShape {
        ModelShape {
            n_verbs: 4,
            n_objects: 3,
            feature_dim: 10,
        }
    }

    fn small(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            n_queries: 4,
            d: 8,
            heads: 2,
            ablation,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn output_shapes() {
        for ab in [Ablation::default(), Ablation::baseline()] {
            let (det, store) = init_detector(&small(ab), shape()).unwrap();
            let grid = Tensor::full(&[6, 10], 0.1);
            let pass = det.predict(&store, &grid).unwrap();
            assert_eq!(pass.outputs.verb_probs.shape(), &[4, 4]);
            assert_eq!(pass.outputs.object_probs.shape(), &[4, 4]);
            assert_eq!(pass.outputs.object_boxes.shape(), &[4, 4]);
            assert_eq!(pass.hands.class_probs.shape(), &[4, 3]);
            assert_eq!(pass.candidates.is_some(), ab.use_hpe);
            for r in 0..4 {
                let s: f64 = pass.outputs.object_probs.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_channel_count() {
        let (det, store) = init_detector(&small(Ablation::default()), shape()).unwrap();
        assert!(det.predict(&store, &Tensor::zeros(&[6, 9])).is_err());
    }

    #[test]
    fn ablation_overrides() {
        let a = Ablation::default().with_overrides("use_hpe=false, use_ir=false,use_hge=false").unwrap();
        assert_eq!(a, Ablation::baseline());
        assert!(Ablation::default().with_overrides("use_x=true").is_err());
        assert!(Ablation::default().with_overrides("use_ir").is_err());
    }

    #[test]
    fn config_json_uses_short_names() {
        let v = serde_json::to_value(TrainConfig::default()).unwrap();
        assert!(v.get("N").is_some() && v.get("K").is_some() && v.get("T_pose").is_some());
        let back: TrainConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, TrainConfig::default());
    }
}
