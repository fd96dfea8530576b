//! Threshold-and-top-K selection of pose proposals per hand side.

use serde::Serialize;

use crate::annotation::HandSide;
use crate::numeric::Tensor;

/// How a proposal slot was filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ProposalFill {
    /// A retained candidate of this side.
    Own,
    /// Borrowed from the other side's retained candidates (or repeated
    /// when fewer than `K` candidates exist across both sides).
    Padded,
    /// No candidate on either side; the pose is all zeros.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub pose: Vec<f64>,
    pub score: f64,
    /// Token the pose came from; `None` for zero fill.
    pub source: Option<usize>,
    pub fill: ProposalFill,
}

/// Exactly `K` proposals per side.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSets {
    pub left: Vec<Proposal>,
    pub right: Vec<Proposal>,
}

impl ProposalSets {
    pub fn side(&self, side: HandSide) -> &[Proposal] {
        match side {
            HandSide::Left => &self.left,
            HandSide::Right => &self.right,
        }
    }

    pub fn fill_flags(&self, side: HandSide) -> Vec<ProposalFill> {
        self.side(side).iter().map(|p| p.fill).collect()
    }
}

/// Per-token hand reading: predicted side (`None` for background) and score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HandReading {
    pub side: Option<HandSide>,
    pub score: f64,
}

/// Retained token indices of one side, best first (ties by token index).
fn retained(readings: &[HandReading], side: HandSide, t_pose: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = readings
        .iter()
        .enumerate()
        .filter(|(_, r)| r.side == Some(side) && r.score >= t_pose)
        .map(|(i, _)| i)
        .collect();
    idx.sort_by(|&a, &b| readings[b].score.total_cmp(&readings[a].score).then(a.cmp(&b)));
    idx
}

fn fill_side(
    own: &[usize],
    other: &[usize],
    k: usize,
    candidates: &Tensor,
    readings: &[HandReading],
) -> Vec<Proposal> {
    let width = candidates.cols();
    let make = |token: usize, fill| Proposal {
        pose: candidates.row(token).to_vec(),
        score: readings[token].score,
        source: Some(token),
        fill,
    };
    let mut out: Vec<Proposal> = own.iter().take(k).map(|&t| make(t, ProposalFill::Own)).collect();
    let need = k - out.len();
    out.extend(other.iter().take(need).map(|&t| make(t, ProposalFill::Padded)));
    if out.len() < k {
        let pool: Vec<usize> = own.iter().chain(other).copied().collect();
        if pool.is_empty() {
            while out.len() < k {
                out.push(Proposal {
                    pose: vec![0.0; width],
                    score: 0.0,
                    source: None,
                    fill: ProposalFill::Zero,
                });
            }
        } else {
            for &t in pool.iter().cycle() {
                if out.len() == k {
                    break;
                }
                out.push(make(t, ProposalFill::Padded));
            }
        }
    }
    out
}

/// Partitions candidates by predicted side, keeps those scoring at least
/// `t_pose`, and takes the best `k` per side, padding a short side with the
/// other side's retained candidates in score order.
pub fn select_proposals(candidates: &Tensor, readings: &[HandReading], t_pose: f64, k: usize) -> ProposalSets {
    debug_assert_eq!(candidates.rows(), readings.len());
    let left = retained(readings, HandSide::Left, t_pose);
    let right = retained(readings, HandSide::Right, t_pose);
    ProposalSets {
        left: fill_side(&left, &right, k, candidates, readings),
        right: fill_side(&right, &left, k, candidates, readings),
    }
}
