//! Layers built from tape operations. Each layer owns only parameter
//! handles; values live in a [`ParamStore`].

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add_glorot(format!("{name}.weight"), d_in, d_out, rng)?;
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?);
        Ok(Self { weight, bias, d_in, d_out })
    }

    /// Projection `x W` with no bias term.
    pub fn without_bias<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add_glorot(format!("{name}.weight"), d_in, d_out, rng)?;
        Ok(Self {
            weight,
            bias: None,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        match self.bias {
            Some(bias) => {
                let b = tape.param(store, bias);
                linear(tape, x, w, b)
            }
            None => {
                if tape.value(w).rows() != tape.value(x).dims2().1 {
                    return Err(Error::shape("linear", tape.shape(x), tape.shape(w)));
                }
                tape.matmul(x, w)
            }
        }
    }
}

/// `x W + b` for `x: (n, d_in)`, `W: (d_in, d_out)`, `b: (d_out)`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (_, d_in) = tape.value(x).dims2();
    if tape.value(w).rows() != d_in {
        return Err(Error::shape("linear", tape.shape(x), tape.shape(w)));
    }
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, store, x)?;
            if i != last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Scaled dot-product attention with `heads` parallel heads and an output
/// projection. The key projection has no bias.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("token dim {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::without_bias(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, rng)?,
            heads,
            d,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, key: Var, value: Var) -> Result<Var> {
        let (m_k, _) = tape.value(key).dims2();
        let (m_v, _) = tape.value(value).dims2();
        if m_k != m_v {
            return Err(Error::shape("attention keys/values", tape.shape(key), tape.shape(value)));
        }
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, key)?;
        let v = self.v.forward(tape, store, value)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scores);
            per_head.push(tape.matmul(weights, vh)?);
        }
        let cat = if per_head.len() == 1 {
            per_head[0]
        } else {
            tape.concat_cols(&per_head)?
        };
        self.out.forward(tape, store, cat)
    }
}

/// Position-wise feed-forward block: linear, ReLU, linear.
pub fn ffn<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut R) -> Result<Mlp> {
    Mlp::new(store, name, &[d, hidden, d], rng)
}

/// Post-norm transformer encoder layer: self-attention then FFN, each with
/// a residual connection followed by layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            ffn: ffn(store, &format!("{name}.ffn"), d, 2 * d, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attn.forward(tape, store, x, x, x)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, x)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, store, x)
    }
}

/// Post-norm decoder layer: optional self-attention, cross-attention to a
/// memory, then FFN.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Option<(MultiHeadAttention, LayerNorm)>,
    pub cross_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub ffn: Mlp,
    pub norm_ffn: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        with_self_attn: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let self_attn = if with_self_attn {
            Some((
                MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, heads, rng)?,
                LayerNorm::new(store, &format!("{name}.norm_self"), d)?,
            ))
        } else {
            None
        };
        Ok(Self {
            self_attn,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, heads, rng)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), d)?,
            ffn: ffn(store, &format!("{name}.ffn"), d, 2 * d, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, memory: Var) -> Result<Var> {
        let mut x = x;
        if let Some((attn, norm)) = &self.self_attn {
            let a = attn.forward(tape, store, x, x, x)?;
            let s = tape.add(x, a)?;
            x = norm.forward(tape, store, s)?;
        }
        let c = self.cross_attn.forward(tape, store, x, memory, memory)?;
        let s = tape.add(x, c)?;
        let x = self.norm_cross.forward(tape, store, s)?;
        let f = self.ffn.forward(tape, store, x)?;
        let s = tape.add(x, f)?;
        self.norm_ffn.forward(tape, store, s)
    }
}
