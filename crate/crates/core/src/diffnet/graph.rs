//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation while the forward pass runs; calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! returns gradients for every parameter that was read.

use std::collections::HashMap;

use super::tensor::{matmul, matmul_nt_acc, matmul_tn_acc};
use super::{ParamId, ParamStore, Tensor};
use crate::geom::{dist2, Point};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a + b` where row `r` of `a` takes row `r / (a.rows / b.rows)` of `b`.
    AddBroadcast(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    GroupMax(Var, Vec<usize>),
    Attention(Box<AttnCache>),
    Sum(Var),
    Chamfer(Box<ChamferCache>),
}

struct AttnCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    tq: usize,
    tk: usize,
    probs: Vec<f64>,
}

struct ChamferCache {
    a: Var,
    target: Vec<Point>,
    n: usize,
    m: usize,
    nn_ab: Vec<usize>,
    nn_ba: Vec<usize>,
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Per-parameter gradients, dense over the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros(store: &ParamStore) -> Self {
        Self { tensors: store.zeros_like() }
    }

    /// Adds `other` scaled by `s`, element-wise.
    pub fn accumulate(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const, t)
    }

    /// Value copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Op::Param(id), Tensor::zeros(0, 0));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "broadcast width mismatch");
        assert!(tb.rows() > 0 && ta.rows() % tb.rows() == 0, "broadcast rows must divide");
        let group = ta.rows() / tb.rows();
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let src = tb.row(r / group);
            out.row_mut(r).iter_mut().zip(src).for_each(|(o, s)| *o += s);
        }
        self.push(Op::AddBroadcast(a, b), out)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "element-wise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), out)
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(factors.len(), out.rows(), "one factor per row");
        for (r, f) in factors.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        self.push(Op::ScaleRows(a, factors), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let out = {
            let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_cols(&ts)
        };
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let t = self.value(a);
        assert!(start + width <= t.cols(), "column slice out of range");
        let mut out = Tensor::zeros(t.rows(), width);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + width]);
        }
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let out = {
            let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_rows(&ts)
        };
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, n: usize) -> Var {
        let out = self.value(a).slice_rows(start, n);
        self.push(Op::SliceRows(a, start), out)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        self.push(Op::Reshape(a), out)
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let t = self.value(a);
        assert!(group > 0 && t.rows() % group == 0, "rows must split into groups");
        let groups = t.rows() / group;
        let cols = t.cols();
        let mut out = Tensor::filled(groups, cols, f64::NEG_INFINITY);
        let mut arg = vec![0usize; groups * cols];
        for g in 0..groups {
            for r in g * group..(g + 1) * group {
                for (c, &v) in t.row(r).iter().enumerate() {
                    if v > out.get(g, c) {
                        out.set(g, c, v);
                        arg[g * cols + c] = r;
                    }
                }
            }
        }
        self.push(Op::GroupMax(a, arg), out)
    }

    /// Multi-head scaled dot-product attention over per-sample token groups.
    ///
    /// `q` holds `tq` consecutive query rows per sample and `k`, `v` hold `tk`
    /// rows per sample; softmax runs over each sample's `tk` keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, tq: usize, tk: usize) -> Var {
        let (tq_t, tk_t, tv_t) = (self.value(q), self.value(k), self.value(v));
        let d = tq_t.cols();
        assert_eq!(d % heads, 0, "heads must divide token width");
        assert_eq!(tk_t.shape(), tv_t.shape(), "keys and values differ in shape");
        assert_eq!(tk_t.cols(), d, "key width mismatch");
        let batch = tq_t.rows() / tq;
        assert_eq!(batch * tq, tq_t.rows(), "query rows not a multiple of tq");
        assert_eq!(batch * tk, tk_t.rows(), "key rows do not match batch");
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(batch * tq, d);
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut scores = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..tq {
                    let qi = &tq_t.row(b * tq + i)[cols.clone()];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &tk_t.row(b * tk + j)[cols.clone()];
                        *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * inv;
                        mx = mx.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let base = ((b * heads + h) * tq + i) * tk;
                    let orow = b * tq + i;
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs[base + j] = p;
                        let vj = &tv_t.row(b * tk + j)[cols.clone()];
                        let o = &mut out.row_mut(orow)[cols.clone()];
                        o.iter_mut().zip(vj).for_each(|(o, v)| *o += p * v);
                    }
                }
            }
        }
        let cache = AttnCache { q, k, v, heads, tq, tk, probs };
        self.push(Op::Attention(Box::new(cache)), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Per-sample symmetric chamfer distance (squared, mean-aggregated).
    ///
    /// `a` holds `n` rows per sample, `target` holds `m` points per sample.
    /// Returns a `batch x 1` column; gradients flow into `a` only.
    pub fn chamfer(&mut self, a: Var, target: Vec<Point>, n: usize, m: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.cols(), 3, "chamfer expects 3-D points");
        let batch = ta.rows() / n;
        assert_eq!(batch * n, ta.rows(), "rows not a multiple of n");
        assert_eq!(batch * m, target.len(), "target size mismatch");
        let pts: Vec<Point> = (0..ta.rows()).map(|r| {
            let row = ta.row(r);
            [row[0], row[1], row[2]]
        }).collect();
        let mut out = Tensor::zeros(batch, 1);
        let mut nn_ab = vec![0; batch * n];
        let mut nn_ba = vec![0; batch * m];
        for b in 0..batch {
            let aa = &pts[b * n..(b + 1) * n];
            let tt = &target[b * m..(b + 1) * m];
            let mut s_ab = 0.0;
            for (i, p) in aa.iter().enumerate() {
                let (j, d) = nearest(p, tt);
                nn_ab[b * n + i] = b * m + j;
                s_ab += d;
            }
            let mut s_ba = 0.0;
            for (j, p) in tt.iter().enumerate() {
                let (i, d) = nearest(p, aa);
                nn_ba[b * m + j] = b * n + i;
                s_ba += d;
            }
            out.set(b, 0, s_ab / n as f64 + s_ba / m as f64);
        }
        let cache = ChamferCache { a, target, n, m, nn_ab, nn_ba };
        self.push(Op::Chamfer(Box::new(cache)), out)
    }

    /// Reverse pass from a `1 x 1` node. Returns gradients for every
    /// parameter in the store; parameters that were never read get zeros.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar node");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::zeros(self.store);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.tensors[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, ta.shape());
                    matmul_nt_acc(&g, tb, ga);
                    let gb = acc(&mut grads, *b, tb.shape());
                    matmul_tn_acc(ta, &g, gb);
                }
                Op::AddBroadcast(a, b) => {
                    let tb_shape = self.shape(*b);
                    let group = g.rows() / tb_shape.0;
                    acc(&mut grads, *a, g.shape()).add_assign(&g);
                    let gb = acc(&mut grads, *b, tb_shape);
                    for r in 0..g.rows() {
                        gb.row_mut(r / group).iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.shape()).add_assign(&g);
                    acc(&mut grads, *b, g.shape()).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.shape()).add_assign(&g);
                    acc(&mut grads, *b, g.shape()).add_scaled(&g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, g.shape());
                    ga.data_mut().iter_mut().zip(g.data().iter().zip(tb.data())).for_each(|(o, (gv, y))| *o += gv * y);
                    let gb = acc(&mut grads, *b, g.shape());
                    gb.data_mut().iter_mut().zip(g.data().iter().zip(ta.data())).for_each(|(o, (gv, x))| *o += gv * x);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.shape()).add_scaled(&g, *s),
                Op::ScaleRows(a, f) => {
                    let ga = acc(&mut grads, *a, g.shape());
                    for (r, s) in f.iter().enumerate() {
                        ga.row_mut(r).iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += s * v);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, g.shape());
                    ga.data_mut().iter_mut().zip(g.data().iter().zip(y.data())).for_each(|(o, (gv, y))| *o += gv * (1.0 - y * y));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, g.shape());
                    ga.data_mut().iter_mut().zip(g.data().iter().zip(y.data())).for_each(|(o, (gv, y))| *o += gv * y * (1.0 - y));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let ga = acc(&mut grads, *a, g.shape());
                    ga.data_mut().iter_mut().zip(g.data().iter().zip(x.data())).for_each(|(o, (gv, x))| *o += 2.0 * gv * x);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let shape = self.shape(*p);
                        let gp = acc(&mut grads, *p, shape);
                        for r in 0..shape.0 {
                            gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + shape.1]).for_each(|(o, v)| *o += v);
                        }
                        off += shape.1;
                    }
                }
                Op::SliceCols(a, start) => {
                    let shape = self.shape(*a);
                    let ga = acc(&mut grads, *a, shape);
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let shape = self.shape(*p);
                        let gp = acc(&mut grads, *p, shape);
                        gp.add_assign(&g.slice_rows(off, shape.0));
                        off += shape.0;
                    }
                }
                Op::SliceRows(a, start) => {
                    let shape = self.shape(*a);
                    let ga = acc(&mut grads, *a, shape);
                    let w = shape.1;
                    ga.data_mut()[start * w..(start + g.rows()) * w].iter_mut().zip(g.data()).for_each(|(o, v)| *o += v);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a);
                    acc(&mut grads, *a, shape).add_assign(&g.clone().reshaped(shape.0, shape.1));
                }
                Op::GroupMax(a, arg) => {
                    let shape = self.shape(*a);
                    let ga = acc(&mut grads, *a, shape);
                    let cols = g.cols();
                    for (i, &r) in arg.iter().enumerate() {
                        let c = i % cols;
                        let v = g.data()[i];
                        ga.row_mut(r)[c] += v;
                    }
                }
                Op::Attention(cache) => self.attention_backward(cache, &g, &mut grads),
                Op::Sum(a) => {
                    let shape = self.shape(*a);
                    let s = g.item();
                    acc(&mut grads, *a, shape).data_mut().iter_mut().for_each(|o| *o += s);
                }
                Op::Chamfer(c) => {
                    let ta = self.value(c.a).clone();
                    let ga = acc(&mut grads, c.a, ta.shape());
                    for (i, &j) in c.nn_ab.iter().enumerate() {
                        let b = i / c.n;
                        let w = 2.0 * g.data()[b] / c.n as f64;
                        let t = c.target[j];
                        for d in 0..3 {
                            let v = ta.get(i, d);
                            ga.row_mut(i)[d] += w * (v - t[d]);
                        }
                    }
                    for (j, &i) in c.nn_ba.iter().enumerate() {
                        let b = j / c.m;
                        let w = 2.0 * g.data()[b] / c.m as f64;
                        let t = c.target[j];
                        for d in 0..3 {
                            let v = ta.get(i, d);
                            ga.row_mut(i)[d] += w * (v - t[d]);
                        }
                    }
                }
            }
        }
        out
    }

    fn attention_backward(&self, c: &AttnCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tq_t, tk_t, tv_t) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = tq_t.cols();
        let dh = d / c.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let batch = tq_t.rows() / c.tq;
        let mut gq = Tensor::zeros(tq_t.rows(), d);
        let mut gk = Tensor::zeros(tk_t.rows(), d);
        let mut gv = Tensor::zeros(tv_t.rows(), d);
        let mut dp = vec![0.0; c.tk];
        for b in 0..batch {
            for h in 0..c.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..c.tq {
                    let base = ((b * c.heads + h) * c.tq + i) * c.tk;
                    let p = &c.probs[base..base + c.tk];
                    let go = &g.row(b * c.tq + i)[cols.clone()];
                    let mut dot = 0.0;
                    for j in 0..c.tk {
                        let vj = &tv_t.row(b * c.tk + j)[cols.clone()];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += dp[j] * p[j];
                        let gvj = &mut gv.row_mut(b * c.tk + j)[cols.clone()];
                        gvj.iter_mut().zip(go).for_each(|(o, x)| *o += p[j] * x);
                    }
                    let qi = tq_t.row(b * c.tq + i)[cols.clone()].to_vec();
                    for j in 0..c.tk {
                        let ds = p[j] * (dp[j] - dot) * inv;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &tk_t.row(b * c.tk + j)[cols.clone()];
                        let gqi = &mut gq.row_mut(b * c.tq + i)[cols.clone()];
                        gqi.iter_mut().zip(kj).for_each(|(o, x)| *o += ds * x);
                        let gkj = &mut gk.row_mut(b * c.tk + j)[cols.clone()];
                        gkj.iter_mut().zip(&qi).for_each(|(o, x)| *o += ds * x);
                    }
                }
            }
        }
        acc(grads, c.q, gq.shape()).add_assign(&gq);
        acc(grads, c.k, gk.shape()).add_assign(&gk);
        acc(grads, c.v, gv.shape()).add_assign(&gv);
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn nearest(p: &Point, set: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in set.iter().enumerate() {
        let d = dist2(*p, *q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
