//! Pairwise joint-direction features.

use super::selection::{ProposalFill, ProposalSets};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Joint pairs closer than this emit a zero direction.
pub const COINCIDENT_EPS: f64 = 1e-8;

/// Length of the per-pose feature for `n_joints` joints.
pub fn pose_feature_len(n_joints: usize) -> usize {
    n_joints * n_joints.saturating_sub(1)
}

/// Length of the global geometry vector for `k` proposals per side.
pub fn global_feature_len(k: usize, n_joints: usize) -> usize {
    2 * k * pose_feature_len(n_joints)
}

/// Unit direction `(dx, dy)` from joint `j` to joint `k` for every pair
/// `j < k`, in lexicographic pair order. `pose` is `[x1, y1, x2, y2, ...]`.
pub fn geometric_features(pose: &[f64]) -> Vec<f64> {
    let n = pose.len() / 2;
    let mut out = Vec::with_capacity(pose_feature_len(n));
    for j in 0..n {
        for k in (j + 1)..n {
            let dx = pose[2 * k] - pose[2 * j];
            let dy = pose[2 * k + 1] - pose[2 * j + 1];
            let r = dx.hypot(dy);
            if r < COINCIDENT_EPS {
                out.extend([0.0, 0.0]);
            } else {
                out.extend([dx / r, dy / r]);
            }
        }
    }
    out
}

/// Differentiable [`geometric_features`] of a `(1, 2 n_joints)` pose row.
pub fn geometric_features_tape(tape: &mut Tape, pose: Var) -> Result<Var> {
    let p = tape.value(pose);
    if p.rows() != 1 || !p.cols().is_multiple_of(2) {
        return Err(Error::shape("geometric_features", p.shape(), &[1, 2]));
    }
    let feats = geometric_features(p.data());
    let n = feats.len();
    let out = Tensor::matrix(1, n, feats)?;
    Ok(tape.custom(
        &[pose],
        out,
        Box::new(|g, xs, y| {
            let p = xs[0].data();
            let n = p.len() / 2;
            let g = g.data();
            let y = y.data();
            let mut gp = vec![0.0; p.len()];
            let mut idx = 0;
            for j in 0..n {
                for k in (j + 1)..n {
                    let (ux, uy) = (y[idx], y[idx + 1]);
                    if ux != 0.0 || uy != 0.0 {
                        let r = (p[2 * k] - p[2 * j]).hypot(p[2 * k + 1] - p[2 * j + 1]);
                        let (gx, gy) = (g[idx], g[idx + 1]);
                        let dot = gx * ux + gy * uy;
                        let ddx = (gx - dot * ux) / r;
                        let ddy = (gy - dot * uy) / r;
                        gp[2 * k] += ddx;
                        gp[2 * k + 1] += ddy;
                        gp[2 * j] -= ddx;
                        gp[2 * j + 1] -= ddy;
                    }
                    idx += 2;
                }
            }
            vec![Tensor::new(xs[0].shape().to_vec(), gp).unwrap()]
        }),
    ))
}

/// Concatenated features of all left proposals then all right proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalGeometryVector {
    pub f: Tensor,
}

impl GlobalGeometryVector {
    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }
}

pub fn global_geometry(props: &ProposalSets) -> GlobalGeometryVector {
    let data: Vec<f64> = props
        .left
        .iter()
        .chain(&props.right)
        .flat_map(|p| match p.fill {
            ProposalFill::Zero => vec![0.0; pose_feature_len(p.pose.len() / 2)],
            _ => geometric_features(&p.pose),
        })
        .collect();
    let n = data.len();
    GlobalGeometryVector {
        f: Tensor::matrix(1, n, data).expect("row vector"),
    }
}

/// Differentiable global geometry: selected rows of `candidates` flow
/// gradients, zero-filled slots are constants.
pub fn global_geometry_tape(tape: &mut Tape, props: &ProposalSets, candidates: Var) -> Result<Var> {
    let n_joints = tape.value(candidates).cols() / 2;
    let mut parts = Vec::with_capacity(props.left.len() + props.right.len());
    for p in props.left.iter().chain(&props.right) {
        let part = match p.source {
            Some(token) => {
                let row = tape.gather_rows(candidates, &[token])?;
                geometric_features_tape(tape, row)?
            }
            None => tape.constant(Tensor::zeros(&[1, pose_feature_len(n_joints)])),
        };
        parts.push(part);
    }
    tape.concat_cols(&parts)
}
