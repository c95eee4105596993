//! Reverse-mode differentiation over vector-valued nodes.
//!
//! Every node holds its forward value eagerly; [`Tape::backward`] walks the
//! nodes in reverse creation order and accumulates parameter gradients into a
//! [`ParamStore`] shaped like the one the tape reads from.

use super::{ParamId, ParamStore};
use crate::error::{PodnetError, Result};

/// Probability floor applied before logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    /// `w x + b` with `w` stored row-major as `[out, in]`.
    Affine { w: ParamId, b: ParamId, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + c` for a constant `c`; gradient passes through unchanged.
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Softmax(Var),
    /// Forward: one-hot of the argmax. Backward: identity onto the input.
    StraightThrough(Var),
    Sum(Var),
    SumSquares(Var),
    /// `Σ p_i ln(max(p_i, PROB_CLAMP) · K)`.
    KlUniform(Var),
    /// Elementwise sum of equally sized nodes.
    AddMany(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn same_len(context: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(PodnetError::shape(context, a, b));
    }
    Ok(())
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn one_hot(k: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[index] = 1.0;
    v
}

pub(crate) fn kl_uniform_value(p: &[f64]) -> f64 {
    let k = p.len() as f64;
    p.iter().map(|&pi| pi * (pi.max(PROB_CLAMP) * k).ln()).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params.tensor(id).data,
            _ => &self.nodes[v.0].value,
        }
    }

    /// First component of a node, for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    /// A parameter tensor as a flat vector node. Repeated calls share a node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.require(name)?;
        Ok(self.param_by_id(id))
    }

    pub fn param_by_id(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Vec::new(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn affine(&mut self, w: ParamId, b: ParamId, x: Var) -> Result<Var> {
        let wt = self.params.tensor(w);
        let bt = self.params.tensor(b);
        let (rows, cols) = wt.matrix_dims();
        let input = self.value(x);
        same_len("affine input", cols, input.len())?;
        same_len("affine bias", rows, bt.len())?;
        let out: Vec<f64> = wt
            .data
            .chunks_exact(cols)
            .zip(&bt.data)
            .map(|(row, bias)| bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        Ok(self.push(out, Op::Affine { w, b, x }))
    }

    fn zip_with(&mut self, a: Var, b: Var, ctx: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_len(ctx, va.len(), vb.len())?;
        let out = va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(out, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let va = self.value(a);
        same_len("offset", va.len(), c.len())?;
        let out = va.iter().zip(c).map(|(x, y)| x + y).collect();
        Ok(self.push(out, Op::Offset(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(out, Op::Sigmoid(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let out = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.len() {
            return Err(PodnetError::shape("slice end", va.len(), start + len));
        }
        let out = va[start..start + len].to_vec();
        Ok(self.push(out, Op::Slice(a, start)))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// Hard one-hot forward value, soft gradient.
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let v = self.value(soft);
        let out = one_hot(v.len(), argmax(v));
        self.push(out, Op::StraightThrough(soft))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum();
        self.push(vec![s], Op::SumSquares(a))
    }

    /// KL divergence of a probability vector to the uniform distribution.
    pub fn kl_uniform(&mut self, probs: Var) -> Var {
        let s = kl_uniform_value(self.value(probs));
        self.push(vec![s], Op::KlUniform(probs))
    }

    pub fn add_many(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| PodnetError::invalid("add_many of no nodes"))?;
        let mut out = self.value(*first).to_vec();
        for &p in &parts[1..] {
            let vp = self.value(p);
            same_len("add_many", out.len(), vp.len())?;
            out.iter_mut().zip(vp).for_each(|(o, x)| *o += x);
        }
        Ok(self.push(out, Op::AddMany(parts.to_vec())))
    }

    /// Accumulate `d root / d params` into `grads`, seeding the root with
    /// `root_scale` and adding any `extra` upstream gradients on other nodes.
    pub fn backward_into(
        &self,
        root: Var,
        root_scale: f64,
        extra: &[(Var, Vec<f64>)],
        grads: &mut ParamStore,
    ) -> Result<()> {
        if !grads.same_layout(self.params) {
            return Err(PodnetError::invalid("gradient store layout differs from parameters"));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![root_scale; self.value(root).len()]);
        let mut last = root.0;
        for (v, g) in extra {
            same_len("extra gradient", self.value(*v).len(), g.len())?;
            accumulate(&mut adj, *v, self.value(*v).len(), |buf| {
                buf.iter_mut().zip(g).for_each(|(b, x)| *b += x)
            });
            last = last.max(v.0);
        }

        for i in (0..=last).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let t = &mut grads.tensors_mut()[id.0];
                    t.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Affine { w, b, x } => {
                    let wt = self.params.tensor(*w);
                    let (_, cols) = wt.matrix_dims();
                    let input = self.value(*x);
                    {
                        let gw = &mut grads.tensors_mut()[w.0].data;
                        for (row, gi) in gw.chunks_exact_mut(cols).zip(&g) {
                            if *gi != 0.0 {
                                row.iter_mut().zip(input).for_each(|(r, xj)| *r += gi * xj);
                            }
                        }
                    }
                    {
                        let gb = &mut grads.tensors_mut()[b.0].data;
                        gb.iter_mut().zip(&g).for_each(|(a, gi)| *a += gi);
                    }
                    accumulate(&mut adj, *x, cols, |buf| {
                        for (row, gi) in wt.data.chunks_exact(cols).zip(&g) {
                            if *gi != 0.0 {
                                buf.iter_mut().zip(row).for_each(|(b, wij)| *b += gi * wij);
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    add_into(&mut adj, *a, &g);
                    add_into(&mut adj, *b, &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, x)| *o -= x)
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut adj, *a, g.len(), |buf| {
                        for ((o, gi), bi) in buf.iter_mut().zip(&g).zip(vb) {
                            *o += gi * bi;
                        }
                    });
                    accumulate(&mut adj, *b, g.len(), |buf| {
                        for ((o, gi), ai) in buf.iter_mut().zip(&g).zip(va) {
                            *o += gi * ai;
                        }
                    });
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.len(), |buf| {
                    buf.iter_mut().zip(&g).for_each(|(o, gi)| *o += s * gi)
                }),
                Op::Offset(a) | Op::StraightThrough(a) => add_into(&mut adj, *a, &g),
                Op::Tanh(a) => accumulate(&mut adj, *a, g.len(), |buf| {
                    for ((o, gi), yi) in buf.iter_mut().zip(&g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }),
                Op::Sigmoid(a) => accumulate(&mut adj, *a, g.len(), |buf| {
                    for ((o, gi), yi) in buf.iter_mut().zip(&g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }),
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        add_into(&mut adj, p, &g[start..start + n]);
                        start += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, n, |buf| {
                        buf[*start..*start + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(o, gi)| *o += gi)
                    });
                }
                Op::Softmax(a) => {
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    accumulate(&mut adj, *a, g.len(), |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(&g).zip(y) {
                            *o += yi * (gi - dot);
                        }
                    });
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut adj, *a, n, |buf| buf.iter_mut().for_each(|o| *o += g[0]));
                }
                Op::SumSquares(a) => {
                    let va = self.value(*a);
                    accumulate(&mut adj, *a, va.len(), |buf| {
                        buf.iter_mut().zip(va).for_each(|(o, x)| *o += 2.0 * g[0] * x)
                    });
                }
                Op::KlUniform(a) => {
                    let p = self.value(*a);
                    let k = p.len() as f64;
                    accumulate(&mut adj, *a, p.len(), |buf| {
                        for (o, &pi) in buf.iter_mut().zip(p) {
                            let d = if pi > PROB_CLAMP {
                                (pi * k).ln() + 1.0
                            } else {
                                (PROB_CLAMP * k).ln()
                            };
                            *o += g[0] * d;
                        }
                    });
                }
                Op::AddMany(parts) => {
                    for &p in parts {
                        add_into(&mut adj, p, &g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradients of a scalar `root` with respect to every parameter.
    pub fn backward(&self, root: Var) -> Result<ParamStore> {
        let mut grads = self.params.zeros_like();
        self.backward_into(root, 1.0, &[], &mut grads)?;
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = adj[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn add_into(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    accumulate(adj, v, g.len(), |buf| {
        buf.iter_mut().zip(g).for_each(|(o, x)| *o += x)
    });
}
