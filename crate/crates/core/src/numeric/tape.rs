//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operation appends a node holding its forward value, the indices
//! of its inputs, and a closure mapping the output gradient to input
//! gradients. [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a valid topological order because inputs always
//! precede outputs.
//!
//! A tape is built per forward pass and dropped afterwards; it is not
//! `Send` and must not be shared between threads.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps `(output gradient, input values, output value)` to one gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Vec::new(), None)
    }

    /// Leaf node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Vec::new(), None);
        self.nodes[v.0].param = Some(id);
        self.param_nodes.insert(id, v);
        v
    }

    /// Records an operation with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let parents = inputs.iter().map(|v| v.0).collect();
        self.push(value, parents, Some(backward))
    }

    /// Back-propagates from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::shape("backward (root must be scalar)", rv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pgrads = bw(&g, &inputs, &node.value);
                debug_assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    debug_assert_eq!(pg.len(), self.nodes[p].value.len());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of parameter leaves into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&id, &v) in &self.param_nodes {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|g, x, _| {
                let ga = g.matmul(&x[1].transpose()).expect("matmul grad");
                let gb = x[0].transpose().matmul(g).expect("matmul grad");
                vec![reshape_like(ga, x[0]), reshape_like(gb, x[1])]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.custom(
            &[a],
            out,
            Box::new(|g, x, _| vec![reshape_like(g.transpose(), x[0])]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.custom(
            &[a],
            out,
            Box::new(|g, x, _| vec![reshape_like(g.clone(), x[0])]),
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.custom(&[a, b], out, Box::new(|g, _, _| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.custom(&[a, b], out, Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|g, x, _| {
                vec![
                    g.zip_map(x[1], |g, b| g * b).unwrap(),
                    g.zip_map(x[0], |g, a| g * a).unwrap(),
                ]
            }),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("div", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|g, x, _| {
                let ga = g.zip_map(x[1], |g, b| g / b).unwrap();
                let mut gb = g.clone();
                for ((v, a), b) in gb.data_mut().iter_mut().zip(x[0].data()).zip(x[1].data()) {
                    *v = -*v * a / (b * b);
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.select_elementwise("maximum", a, b, |x, y| x >= y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.select_elementwise("minimum", a, b, |x, y| x <= y)
    }

    fn select_elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        pick_a: fn(f64, f64) -> bool,
    ) -> Result<Var> {
        self.check_same(op, a, b)?;
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| if pick_a(x, y) { x } else { y })?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(move |g, x, _| {
                let mut ga = g.clone();
                let mut gb = g.clone();
                for i in 0..g.len() {
                    if pick_a(x[0].data()[i], x[1].data()[i]) {
                        gb.data_mut()[i] = 0.0;
                    } else {
                        ga.data_mut()[i] = 0.0;
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.custom(&[a], out, Box::new(move |g, _, _| vec![g.scale(s)]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.custom(&[a], out, Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.custom(
            &[a],
            out,
            Box::new(|g, x, _| vec![g.zip_map(x[0], |g, v| if v > 0.0 { g } else { 0.0 }).unwrap()]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        self.custom(
            &[a],
            out,
            Box::new(|g, _, y| vec![g.zip_map(y, |g, y| g * y * (1.0 - y)).unwrap()]),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.custom(
            &[a],
            out,
            Box::new(|g, x, _| vec![g.zip_map(x[0], |g, v| g * sign(v)).unwrap()]),
        )
    }

    // ---- row-structured -------------------------------------------------

    /// Adds a length-`c` vector to every row of an `(r, c)` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if self.value(bias).len() != c {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (v, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.custom(
            &[x, bias],
            out,
            Box::new(move |g, xs, _| {
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for (acc, gv) in gb.iter_mut().zip(g.row(i)) {
                        *acc += gv;
                    }
                }
                vec![g.clone(), reshape_like(Tensor::vector(gb), xs[1])]
            }),
        ))
    }

    /// Softmax over the last axis of each row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        self.custom(
            &[x],
            out,
            Box::new(move |g, _, y| {
                let mut gx = g.clone();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let mut xhat = Tensor::zeros(&[r, c]);
        let mut inv_std = vec![0.0; r];
        for (i, inv) in inv_std.iter_mut().enumerate() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            *inv = is;
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut out = xhat.clone();
        for i in 0..r {
            for ((o, g), b) in out.row_mut(i).iter_mut().zip(&gv).zip(&bv) {
                *o = *o * g + b;
            }
        }
        let out = reshape_like(out, xv);
        Ok(self.custom(
            &[x, gain, bias],
            out,
            Box::new(move |g, xs, _| {
                let gain = xs[1].data();
                let mut gx = Tensor::zeros(&[r, c]);
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                for (i, &is) in inv_std.iter().enumerate() {
                    let gr = g.row(i);
                    let xh = xhat.row(i);
                    let mut gxh = vec![0.0; c];
                    for j in 0..c {
                        gxh[j] = gr[j] * gain[j];
                        ggain[j] += gr[j] * xh[j];
                        gbias[j] += gr[j];
                    }
                    let m1 = gxh.iter().sum::<f64>() / c as f64;
                    let m2 = gxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = is * (gxh[j] - m1 - xh[j] * m2);
                    }
                }
                vec![
                    reshape_like(gx, xs[0]),
                    reshape_like(Tensor::vector(ggain), xs[1]),
                    reshape_like(Tensor::vector(gbias), xs[2]),
                ]
            }),
        ))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[rows, total]);
        for i in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out.row_mut(i)[off..off + w].copy_from_slice(self.value(p).row(i));
                off += w;
            }
        }
        Ok(self.custom(
            parts,
            out,
            Box::new(move |g, xs, _| {
                let mut off = 0;
                let mut res = Vec::with_capacity(xs.len());
                for (x, &w) in xs.iter().zip(&widths) {
                    let mut gp = Tensor::zeros(&[rows, w]);
                    for i in 0..rows {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    off += w;
                    res.push(reshape_like(gp, x));
                }
                res
            }),
        ))
    }

    /// Row-wise concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut heights = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), v.shape()));
            }
            heights.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(heights.iter().sum(), cols, data)?;
        Ok(self.custom(
            parts,
            out,
            Box::new(move |g, xs, _| {
                let mut start = 0;
                xs.iter()
                    .zip(&heights)
                    .map(|(x, &h)| {
                        let d = g.data()[start * cols..(start + h) * cols].to_vec();
                        start += h;
                        reshape_like(Tensor::matrix(h, cols, d).unwrap(), x)
                    })
                    .collect()
            }),
        ))
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start > end || end > c {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let mut out = Tensor::zeros(&[r, w]);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&self.value(x).row(i)[start..end]);
        }
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, xs, _| {
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    gx.row_mut(i)[start..end].copy_from_slice(g.row(i));
                }
                vec![reshape_like(gx, xs[0])]
            }),
        ))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", self.shape(x), &[bad]));
        }
        let mut out = Tensor::zeros(&[idx.len(), c]);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.value(x).row(i));
        }
        let idx = idx.to_vec();
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, xs, _| {
                let mut gx = Tensor::zeros(&[r, c]);
                for (o, &i) in idx.iter().enumerate() {
                    for (a, b) in gx.row_mut(i).iter_mut().zip(g.row(o)) {
                        *a += b;
                    }
                }
                vec![reshape_like(gx, xs[0])]
            }),
        ))
    }

    /// Repeats a single row `n` times.
    pub fn tile_rows(&mut self, x: Var, n: usize) -> Var {
        let row = self.value(x).data().to_vec();
        let c = row.len();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let out = Tensor::matrix(n, c, data).expect("tile shape");
        self.custom(
            &[x],
            out,
            Box::new(move |g, xs, _| {
                let mut gx = vec![0.0; c];
                for i in 0..n {
                    for (a, b) in gx.iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                vec![reshape_like(Tensor::vector(gx), xs[0])]
            }),
        )
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.custom(
            &[x],
            out,
            Box::new(|g, xs, _| vec![Tensor::full(xs[0].shape(), g.item())]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gives `t` the shape of `like` (element counts must agree).
pub(crate) fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    t.reshape(like.shape()).expect("gradient shape")
}
