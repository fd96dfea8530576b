//! Hand geometry and interactivity refinement.
//!
//! Hand tokens from a set-prediction host are re-encoded, split into a
//! detection branch and a pose-offset branch, and decoded into per-token
//! hand boxes and 21-joint pose candidates. The most confident candidates
//! per hand are turned into a global vector of joint directions, while the
//! interaction tokens attend to the pose-offset features. Both are fused
//! into the final interaction embedding `E`.

pub mod geometry;
pub mod selection;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use geometry::{
    geometric_features, geometric_features_tape, global_feature_len, global_geometry, global_geometry_tape,
    pose_feature_len, GlobalGeometryVector, COINCIDENT_EPS,
};
pub use selection::{select_proposals, HandReading, Proposal, ProposalFill, ProposalSets};

use crate::annotation::{HandPose, HandSide, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::numeric::loss::l1_tape;
use crate::numeric::nn::{DecoderLayer, EncoderLayer, Linear, Mlp};
use crate::numeric::{argmax, ParamStore, Tape, Tensor, Var};

/// Number of hand classes including background.
pub const HAND_CLASSES: usize = 3;
pub const BACKGROUND_CLASS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceMode {
    Direct,
    Learnable,
    Center,
    #[default]
    TopCenter,
}

impl std::str::FromStr for ReferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "direct" => Ok(Self::Direct),
            "learnable" => Ok(Self::Learnable),
            "center" => Ok(Self::Center),
            "topcenter" => Ok(Self::TopCenter),
            _ => Err(Error::Config(format!("unknown reference mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HgirConfig {
    pub n_queries: usize,
    pub d: usize,
    pub n_joints: usize,
    pub k: usize,
    pub t_pose: f64,
    pub heads: usize,
    pub reference_mode: ReferenceMode,
    pub use_hpe: bool,
    pub use_ir: bool,
    pub use_hge: bool,
}

impl Default for HgirConfig {
    fn default() -> Self {
        Self {
            n_queries: 16,
            d: 32,
            n_joints: NUM_JOINTS,
            k: 1,
            t_pose: 0.5,
            heads: 4,
            reference_mode: ReferenceMode::TopCenter,
            use_hpe: true,
            use_ir: true,
            use_hge: true,
        }
    }
}

impl HgirConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_queries == 0 {
            return fail("n_queries must be positive".into());
        }
        if self.n_joints < 2 {
            return fail(format!("n_joints must be at least 2, got {}", self.n_joints));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.t_pose) {
            return fail(format!("t_pose {} outside [0, 1]", self.t_pose));
        }
        if self.heads == 0 || self.d == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d = {} not divisible by {} heads", self.d, self.heads));
        }
        if (self.use_ir || self.use_hge) && !self.use_hpe {
            return fail("use_ir and use_hge need use_hpe".into());
        }
        Ok(())
    }

    /// Configuration with every HGIR component switched off.
    pub fn baseline(mut self) -> Self {
        self.use_hpe = false;
        self.use_ir = false;
        self.use_hge = false;
        self
    }

    pub fn geometry_len(&self) -> usize {
        global_feature_len(self.k, self.n_joints)
    }
}

/// Hand tokens after encoding and branch split; all share token order.
#[derive(Clone, Copy, Debug)]
pub struct HandTokenBundle {
    pub h_star: Var,
    pub h_det: Var,
    pub h_off: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandPrediction {
    /// `(N, 3)` softmax over Left, Right, background.
    pub class_probs: Tensor,
    /// `(N, 4)` normalized `cx, cy, w, h`.
    pub boxes: Tensor,
    /// Non-background argmax per token.
    pub class_id: Vec<HandSide>,
    /// Non-background max probability per token.
    pub score: Vec<f64>,
}

impl HandPrediction {
    pub fn from_tensors(class_probs: Tensor, boxes: Tensor) -> Self {
        let (class_id, score) = (0..class_probs.rows())
            .map(|i| {
                let r = class_probs.row(i);
                if r[HandSide::Right.class_index()] > r[HandSide::Left.class_index()] {
                    (HandSide::Right, r[HandSide::Right.class_index()])
                } else {
                    (HandSide::Left, r[HandSide::Left.class_index()])
                }
            })
            .unzip();
        Self {
            class_probs,
            boxes,
            class_id,
            score,
        }
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    /// Whether background wins the full argmax for token `i`.
    pub fn is_background(&self, i: usize) -> bool {
        argmax(self.class_probs.row(i)) == BACKGROUND_CLASS
    }

    /// Side and score per token; background tokens carry no side.
    pub fn readings(&self) -> Vec<HandReading> {
        (0..self.len())
            .map(|i| HandReading {
                side: (!self.is_background(i)).then_some(self.class_id[i]),
                score: self.score[i],
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseCandidateSet {
    pub candidates: Tensor,
    pub reference_points: Tensor,
    pub offsets: Tensor,
}

/// Broadcasts `(N, 2)` reference points over every joint and adds offsets.
pub fn compose_candidates(reference: &Tensor, offsets: &Tensor) -> Result<PoseCandidateSet> {
    if reference.cols() != 2 || offsets.rows() != reference.rows() || !offsets.cols().is_multiple_of(2) {
        return Err(Error::shape("compose_candidates", reference.shape(), offsets.shape()));
    }
    let mut candidates = offsets.clone();
    for i in 0..candidates.rows() {
        let (rx, ry) = (reference.get(i, 0), reference.get(i, 1));
        for xy in candidates.row_mut(i).chunks_mut(2) {
            xy[0] += rx;
            xy[1] += ry;
        }
    }
    Ok(PoseCandidateSet {
        candidates,
        reference_points: reference.clone(),
        offsets: offsets.clone(),
    })
}

/// Value-level reference points for `(N, 4)` cxcywh boxes. `Learnable`
/// needs the detection features and is only available on [`Hgir`].
pub fn reference_points(boxes: &Tensor, mode: ReferenceMode) -> Result<Tensor> {
    let n = boxes.rows();
    let mut out = Tensor::zeros(&[n, 2]);
    match mode {
        ReferenceMode::Direct => {}
        ReferenceMode::Center | ReferenceMode::TopCenter => {
            for i in 0..n {
                let b = boxes.row(i);
                let y = if mode == ReferenceMode::Center { b[1] } else { b[1] - 0.5 * b[3] };
                out.set(i, 0, b[0]);
                out.set(i, 1, y);
            }
        }
        ReferenceMode::Learnable => {
            return Err(Error::Config("learnable reference points need detection features".into()));
        }
    }
    Ok(out)
}

/// Mean over matched tokens of the per-token mean absolute joint error.
pub fn pose_loss(candidates: &PoseCandidateSet, matched: &[(usize, HandPose)]) -> Result<f64> {
    if matched.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (token, pose) in matched {
        if *token >= candidates.candidates.rows() {
            return Err(Error::Input(format!("matched token {token} out of range")));
        }
        let pred = candidates.candidates.row(*token);
        let target = pose.to_flat();
        if target.len() != pred.len() {
            return Err(Error::shape("pose_loss", &[pred.len()], &[target.len()]));
        }
        total += pred.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64;
    }
    Ok(total / matched.len() as f64)
}

/// Differentiable [`pose_loss`] over the candidate matrix on the tape.
pub fn pose_loss_tape(tape: &mut Tape, candidates: Var, matched: &[(usize, HandPose)]) -> Result<Var> {
    if matched.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let idx: Vec<usize> = matched.iter().map(|(t, _)| *t).collect();
    let rows: Vec<Vec<f64>> = matched.iter().map(|(_, p)| p.to_flat()).collect();
    let target = Tensor::from_rows(&rows)?;
    let picked = tape.gather_rows(candidates, &idx)?;
    l1_tape(tape, picked, &target)
}

/// Tape handles and values produced by one [`Hgir::forward`] call.
#[derive(Clone, Debug)]
pub struct HgirOutput {
    pub e: Var,
    pub tokens: HandTokenBundle,
    pub hand_logits: Var,
    pub hand_boxes: Var,
    pub candidates_var: Var,
    pub hands: HandPrediction,
    pub candidates: PoseCandidateSet,
    pub proposals: ProposalSets,
    pub geometry: Option<Var>,
}

/// Parameters of the HGIR block.
#[derive(Clone, Debug)]
pub struct Hgir {
    pub config: HgirConfig,
    pub encoder: EncoderLayer,
    pub det_branch: Mlp,
    pub off_branch: Mlp,
    pub class_head: Linear,
    pub box_head: Mlp,
    pub offset_head: Linear,
    pub reference_head: Option<Linear>,
    pub refiner: DecoderLayer,
    pub embed: Mlp,
}

impl Hgir {
    pub fn new<R: Rng>(store: &mut ParamStore, config: HgirConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let reference_head = match config.reference_mode {
            ReferenceMode::Learnable => Some(Linear::new(store, "hgir.ref_head", d, 2, rng)?),
            _ => None,
        };
        Ok(Self {
            encoder: EncoderLayer::new(store, "hgir.encoder", d, config.heads, rng)?,
            det_branch: Mlp::new(store, "hgir.det", &[d, d, d], rng)?,
            off_branch: Mlp::new(store, "hgir.off", &[d, d, d], rng)?,
            class_head: Linear::new(store, "hgir.class_head", d, HAND_CLASSES, rng)?,
            box_head: Mlp::new(store, "hgir.box_head", &[d, d, 4], rng)?,
            offset_head: Linear::new(store, "hgir.offset_head", d, 2 * config.n_joints, rng)?,
            reference_head,
            refiner: DecoderLayer::new(store, "hgir.refiner", d, config.heads, true, rng)?,
            embed: Mlp::new(store, "hgir.embed", &[d + config.geometry_len(), d, d], rng)?,
            config,
        })
    }

    fn check_tokens(&self, tape: &Tape, x: Var, what: &'static str) -> Result<()> {
        let (n, d) = tape.value(x).dims2();
        if d != self.config.d || tape.shape(x).len() != 2 {
            return Err(Error::shape(what, tape.shape(x), &[n, self.config.d]));
        }
        Ok(())
    }

    pub fn encode_hands(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        self.check_tokens(tape, h, "encode_hands")?;
        self.encoder.forward(tape, store, h)
    }

    pub fn split_det_off(&self, tape: &mut Tape, store: &ParamStore, h_star: Var) -> Result<(Var, Var)> {
        let det = self.det_branch.forward(tape, store, h_star)?;
        let off = self.off_branch.forward(tape, store, h_star)?;
        Ok((det, off))
    }

    /// Class logits `(N, 3)` and sigmoid boxes `(N, 4)`.
    pub fn hand_heads(&self, tape: &mut Tape, store: &ParamStore, h_det: Var) -> Result<(Var, Var)> {
        let logits = self.class_head.forward(tape, store, h_det)?;
        let raw = self.box_head.forward(tape, store, h_det)?;
        Ok((logits, tape.sigmoid(raw)))
    }

    pub fn reference_points_tape(&self, tape: &mut Tape, store: &ParamStore, boxes: Var, h_det: Var) -> Result<Var> {
        let n = tape.value(boxes).rows();
        match self.config.reference_mode {
            ReferenceMode::Direct => Ok(tape.constant(Tensor::zeros(&[n, 2]))),
            ReferenceMode::Center => tape.slice_cols(boxes, 0, 2),
            ReferenceMode::TopCenter => {
                let cx = tape.slice_cols(boxes, 0, 1)?;
                let cy = tape.slice_cols(boxes, 1, 2)?;
                let h = tape.slice_cols(boxes, 3, 4)?;
                let half = tape.scale(h, 0.5);
                let top = tape.sub(cy, half)?;
                tape.concat_cols(&[cx, top])
            }
            ReferenceMode::Learnable => {
                let head = self
                    .reference_head
                    .as_ref()
                    .ok_or_else(|| Error::Config("missing learnable reference head".into()))?;
                let raw = head.forward(tape, store, h_det)?;
                Ok(tape.sigmoid(raw))
            }
        }
    }

    /// Joint offsets in `(-0.5, 0.5)`.
    pub fn predict_offsets(&self, tape: &mut Tape, store: &ParamStore, h_off: Var) -> Result<Var> {
        let raw = self.offset_head.forward(tape, store, h_off)?;
        let s = tape.sigmoid(raw);
        Ok(tape.add_scalar(s, -0.5))
    }

    pub fn compose_candidates_tape(&self, tape: &mut Tape, reference: Var, offsets: Var) -> Result<Var> {
        let tiled: Vec<Var> = vec![reference; self.config.n_joints];
        let broadcast = tape.concat_cols(&tiled)?;
        tape.add(broadcast, offsets)
    }

    pub fn refine_interactions(&self, tape: &mut Tape, store: &ParamStore, i: Var, h_off: Var) -> Result<Var> {
        self.check_tokens(tape, i, "refine_interactions")?;
        if tape.shape(i) != tape.shape(h_off) {
            return Err(Error::shape("refine_interactions", tape.shape(i), tape.shape(h_off)));
        }
        self.refiner.forward(tape, store, i, h_off)
    }

    /// Tiles the `(1, F)` geometry row over every token, concatenates with
    /// `I*` and projects back to `d`.
    pub fn aggregate(&self, tape: &mut Tape, store: &ParamStore, i_star: Var, f: Var) -> Result<Var> {
        let n = tape.value(i_star).rows();
        let tiled = tape.tile_rows(f, n);
        let cat = tape.concat_cols(&[i_star, tiled])?;
        self.embed.forward(tape, store, cat)
    }

    /// Runs the block on host hand tokens `h` and interaction tokens `i`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, i: Var) -> Result<HgirOutput> {
        let cfg = &self.config;
        let h_star = self.encode_hands(tape, store, h)?;
        let (h_det, h_off) = self.split_det_off(tape, store, h_star)?;
        let (hand_logits, hand_boxes) = self.hand_heads(tape, store, h_det)?;
        let probs = tape.value(hand_logits).softmax(crate::numeric::Axis::Cols);
        let hands = HandPrediction::from_tensors(probs, tape.value(hand_boxes).clone());

        let reference = self.reference_points_tape(tape, store, hand_boxes, h_det)?;
        let offsets = self.predict_offsets(tape, store, h_off)?;
        let candidates_var = self.compose_candidates_tape(tape, reference, offsets)?;
        let candidates = PoseCandidateSet {
            candidates: tape.value(candidates_var).clone(),
            reference_points: tape.value(reference).clone(),
            offsets: tape.value(offsets).clone(),
        };
        let proposals = select_proposals(&candidates.candidates, &hands.readings(), cfg.t_pose, cfg.k);

        let i_star = if cfg.use_ir {
            self.refine_interactions(tape, store, i, h_off)?
        } else {
            i
        };
        let (e, geometry) = if cfg.use_hge {
            let f = global_geometry_tape(tape, &proposals, candidates_var)?;
            (self.aggregate(tape, store, i_star, f)?, Some(f))
        } else {
            (i_star, None)
        };
        Ok(HgirOutput {
            e,
            tokens: HandTokenBundle { h_star, h_det, h_off },
            hand_logits,
            hand_boxes,
            candidates_var,
            hands,
            candidates,
            proposals,
            geometry,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{grad_check, DEFAULT_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> HgirConfig {
        HgirConfig {
            n_queries: 4,
            d: 8,
            n_joints: 3,
            k: 1,
            t_pose: 0.0,
            heads: 2,
            ..HgirConfig::default()
        }
    }

    fn tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn reference_modes() {
        let boxes = Tensor::from_rows(&[vec![0.4, 0.6, 0.4, 0.4]]).unwrap();
        let top = reference_points(&boxes, ReferenceMode::TopCenter).unwrap();
        assert!((top.get(0, 0) - 0.4).abs() < 1e-15 && (top.get(0, 1) - 0.4).abs() < 1e-15);
        let c = reference_points(&boxes, ReferenceMode::Center).unwrap();
        assert_eq!(c.row(0), &[0.4, 0.6]);
        assert_eq!(reference_points(&boxes, ReferenceMode::Direct).unwrap().row(0), &[0.0, 0.0]);
        assert!("sideways".parse::<ReferenceMode>().is_err());
        assert_eq!("top-center".parse::<ReferenceMode>().unwrap(), ReferenceMode::TopCenter);
    }

    #[test]
    fn compose_identity() {
        let r = Tensor::from_rows(&[vec![0.4, 0.4]]).unwrap();
        let mut d = Tensor::zeros(&[1, 42]);
        d.set(0, 0, 0.1);
        d.set(0, 1, -0.2);
        let p = compose_candidates(&r, &d).unwrap();
        assert!((p.candidates.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((p.candidates.get(0, 1) - 0.2).abs() < 1e-15);
        assert_eq!(p.candidates.get(0, 2), 0.4);
    }

    #[test]
    fn pose_loss_uniform_error() {
        let joints: Vec<[f64; 2]> = (0..21).map(|j| [0.01 * j as f64, 0.5]).collect();
        let pose = HandPose::new(joints).unwrap();
        let shifted: Vec<f64> = pose.to_flat().iter().map(|v| v + 0.1).collect();
        let c = PoseCandidateSet {
            candidates: Tensor::matrix(1, 42, shifted).unwrap(),
            reference_points: Tensor::zeros(&[1, 2]),
            offsets: Tensor::zeros(&[1, 42]),
        };
        assert!((pose_loss(&c, &[(0, pose.clone())]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(pose_loss(&c, &[]).unwrap(), 0.0);
    }

    #[test]
    fn zero_logits_are_uniform() {
        let probs = Tensor::zeros(&[2, 3]).softmax(crate::numeric::Axis::Cols);
        let hp = HandPrediction::from_tensors(probs, Tensor::full(&[2, 4], 0.5));
        for i in 0..2 {
            for &p in hp.class_probs.row(i) {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert_eq!(hp.class_id[0], HandSide::Left);
    }

    #[test]
    fn config_rules() {
        assert!(HgirConfig::default().validate().is_ok());
        assert!(HgirConfig { heads: 3, ..Default::default() }.validate().is_err());
        assert!(HgirConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(HgirConfig { use_hpe: false, ..Default::default() }.validate().is_err());
        assert!(HgirConfig::default().baseline().validate().is_ok());
        let json = serde_json::to_string(&HgirConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<HgirConfig>(&json).unwrap(), HgirConfig::default());
    }

    #[test]
    fn forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = small_config();
        let model = Hgir::new(&mut store, cfg.clone(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(tokens(&mut rng, 4, 8));
        let i = tape.constant(tokens(&mut rng, 4, 8));
        let out = model.forward(&mut tape, &store, h, i).unwrap();
        assert_eq!(tape.shape(out.e), &[4, 8]);
        assert_eq!(out.proposals.left.len(), 1);
        assert_eq!(tape.shape(out.geometry.unwrap()), &[1, cfg.geometry_len()]);
        let wrong = tape.constant(Tensor::zeros(&[4, 5]));
        assert!(model.forward(&mut tape, &store, wrong, i).is_err());
    }

    #[test]
    fn bypassed_forward_returns_interaction_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = HgirConfig {
            use_ir: false,
            use_hge: false,
            ..small_config()
        };
        let model = Hgir::new(&mut store, cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(tokens(&mut rng, 4, 8));
        let i = tape.constant(tokens(&mut rng, 4, 8));
        let out = model.forward(&mut tape, &store, h, i).unwrap();
        assert_eq!(out.e, i);
    }

    #[test]
    fn full_path_gradcheck() {
        for mode in [ReferenceMode::TopCenter, ReferenceMode::Learnable] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::new();
            let cfg = HgirConfig {
                reference_mode: mode,
                ..small_config()
            };
            let model = Hgir::new(&mut store, cfg, &mut rng).unwrap();
            let h = tokens(&mut rng, 4, 8);
            let i = tokens(&mut rng, 4, 8);
            let ce = tokens(&mut rng, 4, 8);
            let cp = tokens(&mut rng, 4, 6);
            let report = grad_check(&mut store, DEFAULT_EPS, |tape, store| {
                let hv = tape.constant(h.clone());
                let iv = tape.constant(i.clone());
                let out = model.forward(tape, store, hv, iv)?;
                let we = tape.constant(ce.clone());
                let wp = tape.constant(cp.clone());
                let a = tape.mul(out.e, we)?;
                let b = tape.mul(out.candidates_var, wp)?;
                let a = tape.sum(a);
                let b = tape.sum(b);
                tape.add(a, b)
            })
            .unwrap();
            assert!(report.max_rel_error <= 1e-5, "{mode:?}: {report:?}");
        }
    }
}
