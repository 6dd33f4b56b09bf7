//! Reverse-mode tape. Every op appends a node; `backward` walks the nodes in
//! reverse creation order, which is a valid topological order.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{broadcast_shape, for_each_broadcast, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Sqrt,
    Square,
    Neg,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Transpose(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Drops every recorded node and gradient. Outstanding `Var`s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.id = NEXT_TAPE.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.index(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    /// `None` if `v` did not influence the loss or does not track gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.index(v);
        let g = self.grads.get(i)?.as_ref()?;
        Some(Tensor::from_parts(
            self.nodes[i].value.shape().to_vec(),
            g.clone(),
        ))
    }

    fn index(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used with a foreign tape");
        v.id
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn node(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.id)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", Binary::Div, a, b)
    }

    fn binary(&mut self, name: &'static str, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.node(a)?, self.node(b)?);
        let sa = self.nodes[ia].value.shape();
        let sb = self.nodes[ib].value.shape();
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::Shape {
            op: name,
            detail: format!("{sa:?} and {sb:?}"),
        })?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0; n];
        {
            let da = self.nodes[ia].value.data();
            let db = self.nodes[ib].value.data();
            for_each_broadcast(&out_shape, sa, sb, |o, i, j| {
                let (x, y) = (da[i], db[j]);
                out[o] = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                };
            });
        }
        let value = Tensor::from_parts(out_shape, out);
        self.record(name, value, Op::Binary(kind, ia, ib), &[ia, ib])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.node(a)?;
        let value = self.map_value(ia, |x| x + c);
        self.record("add_scalar", value, Op::AddScalar(ia), &[ia])
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.node(a)?;
        let value = self.map_value(ia, |x| x * c);
        self.record("mul_scalar", value, Op::MulScalar(ia, c), &[ia])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.node(a)?;
        let value = self.map_value(ia, |x| x.clamp(lo, hi));
        self.record("clamp", value, Op::Clamp(ia, lo, hi), &[ia])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", Unary::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", Unary::Square, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("negate", Unary::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", Unary::Sigmoid, a)
    }

    fn unary(&mut self, name: &'static str, kind: Unary, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let value = self.map_value(ia, |x| match kind {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Neg => -x,
            Unary::Relu => x.max(0.0),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
        });
        self.record(name, value, Op::Unary(kind, ia), &[ia])
    }

    fn map_value(&self, i: usize, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[i].value;
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[.., m, k] x [k, n] -> [.., m, n]`, or batched `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.node(a)?, self.node(b)?);
        let sa = self.nodes[ia].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape().to_vec();
        let geom = MatMulGeom::new(&sa, &sb)?;
        let mut out = vec![0.0; geom.batch * geom.m * geom.n];
        {
            let da = self.nodes[ia].value.data();
            let db = self.nodes[ib].value.data();
            for bi in 0..geom.batch {
                let a_blk = &da[bi * geom.m * geom.k..(bi + 1) * geom.m * geom.k];
                let b_blk = if geom.shared_rhs {
                    db
                } else {
                    &db[bi * geom.k * geom.n..(bi + 1) * geom.k * geom.n]
                };
                let o_blk = &mut out[bi * geom.m * geom.n..(bi + 1) * geom.m * geom.n];
                gemm_nn(a_blk, b_blk, o_blk, geom.m, geom.k, geom.n);
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(geom.n);
        let value = Tensor::from_parts(shape, out);
        self.record("matmul", value, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let s = self.nodes[ia].value.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::Shape {
                op: "transpose",
                detail: format!("{s:?} has fewer than two axes"),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.nodes[ia].value.data();
        let mut out = vec![0.0; src.len()];
        for blk in 0..src.len() / (r * c) {
            let base = blk * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        shape.swap(s.len() - 2, s.len() - 1);
        let value = Tensor::from_parts(shape, out);
        self.record("transpose", value, Op::Transpose(ia), &[ia])
    }

    // ---- reductions and normalizations -----------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let value = self.rowwise(ia, "softmax", |row, out| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        })?;
        self.record("softmax", value, Op::Softmax(ia), &[ia])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let value = self.rowwise(ia, "log_softmax", |row, out| {
            let lse = logsumexp(row);
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x - lse;
            }
        })?;
        self.record("log_softmax", value, Op::LogSoftmax(ia), &[ia])
    }

    /// log(sum(exp(.))) over the last axis; the axis is removed.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let t = &self.nodes[ia].value;
        let (shape, width) = split_last(t.shape(), "logsumexp")?;
        let out: Vec<f64> = t.data().chunks(width).map(logsumexp).collect();
        let value = Tensor::from_parts(shape, out);
        self.record("logsumexp", value, Op::LogSumExp(ia), &[ia])
    }

    /// Sum over the last axis; the axis is removed.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let t = &self.nodes[ia].value;
        let (shape, width) = split_last(t.shape(), "sum_last")?;
        let out: Vec<f64> = t.data().chunks(width).map(|r| r.iter().sum()).collect();
        let value = Tensor::from_parts(shape, out);
        self.record("sum_last", value, Op::SumLast(ia), &[ia])
    }

    /// Sum of all elements (scalar).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    /// Mean of all elements (scalar).
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.node(a)?;
        let t = &self.nodes[ia].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.record("mean", Tensor::scalar(s), Op::Mean(ia), &[ia])
    }

    fn rowwise(
        &self,
        i: usize,
        op: &'static str,
        f: impl Fn(&[f64], &mut [f64]),
    ) -> Result<Tensor> {
        let t = &self.nodes[i].value;
        let (_, width) = split_last(t.shape(), op)?;
        let mut out = vec![0.0; t.numel()];
        for (row, o) in t.data().chunks(width).zip(out.chunks_mut(width)) {
            f(row, o);
        }
        Ok(Tensor::from_parts(t.shape().to_vec(), out))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let ids = parts.iter().map(|&p| self.node(p)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[ids[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape {
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!("{first:?} and {s:?} along axis {axis}"),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let t = &self.nodes[i].value;
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        self.record("concat", value, Op::Concat(ids.clone(), axis), &ids)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.node(a)?;
        let s = self.nodes[ia].value.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.nodes[ia].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::from_parts(shape, out);
        self.record("slice", value, Op::Slice(ia, axis, start), &[ia])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.node(a)?;
        let value = self.nodes[ia].value.clone().reshape(shape)?;
        self.record("reshape", value, Op::Reshape(ia), &[ia])
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node that
    /// tracks gradients and lies upstream of it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss)?;
        let shape = self.nodes[root].value.shape();
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: usize, f: impl FnOnce(&mut [f64], &Tensor)) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let n = self.nodes[target].value.numel();
        let mut buf = self.grads[target].take().unwrap_or_else(|| vec![0.0; n]);
        f(&mut buf, &self.nodes[target].value);
        self.grads[target] = Some(buf);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => self.backward_binary(i, kind, a, b, g),
            Op::Unary(kind, a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(a, |ga, x| {
                    let x = x.data();
                    for k in 0..ga.len() {
                        ga[k] += g[k]
                            * match kind {
                                Unary::Exp => y[k],
                                Unary::Log => 1.0 / x[k],
                                Unary::Sqrt => 0.5 / y[k],
                                Unary::Square => 2.0 * x[k],
                                Unary::Neg => -1.0,
                                Unary::Relu => f64::from(u8::from(x[k] > 0.0)),
                                Unary::Tanh => 1.0 - y[k] * y[k],
                                Unary::Sigmoid => y[k] * (1.0 - y[k]),
                            };
                    }
                });
            }
            Op::AddScalar(a) => self.accumulate(a, |ga, _| add_into(ga, g)),
            Op::MulScalar(a, c) => self.accumulate(a, |ga, _| {
                ga.iter_mut().zip(g).for_each(|(o, &d)| *o += c * d)
            }),
            Op::Clamp(a, lo, hi) => self.accumulate(a, |ga, x| {
                for ((o, &d), &xv) in ga.iter_mut().zip(g).zip(x.data()) {
                    if xv >= lo && xv <= hi {
                        *o += d;
                    }
                }
            }),
            Op::MatMul(a, b) => self.backward_matmul(a, b, g),
            Op::Softmax(a) => {
                let y = self.nodes[i].value.clone();
                let w = *y.shape().last().unwrap_or(&1);
                self.accumulate(a, |ga, _| {
                    for ((go, gr), yr) in ga.chunks_mut(w).zip(g.chunks(w)).zip(y.data().chunks(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for k in 0..w {
                            go[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = self.nodes[i].value.clone();
                let w = *y.shape().last().unwrap_or(&1);
                self.accumulate(a, |ga, _| {
                    for ((go, gr), yr) in ga.chunks_mut(w).zip(g.chunks(w)).zip(y.data().chunks(w)) {
                        let total: f64 = gr.iter().sum();
                        for k in 0..w {
                            go[k] += gr[k] - yr[k].exp() * total;
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(a, |ga, x| {
                    let w = *x.shape().last().unwrap_or(&1);
                    for (r, (go, xr)) in ga.chunks_mut(w).zip(x.data().chunks(w)).enumerate() {
                        for k in 0..w {
                            go[k] += g[r] * (xr[k] - y[r]).exp();
                        }
                    }
                });
            }
            Op::Sum(a) => self.accumulate(a, |ga, _| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => self.accumulate(a, |ga, _| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|o| *o += s)
            }),
            Op::SumLast(a) => self.accumulate(a, |ga, x| {
                let w = *x.shape().last().unwrap_or(&1);
                for (r, go) in ga.chunks_mut(w).enumerate() {
                    go.iter_mut().for_each(|o| *o += g[r]);
                }
            }),
            Op::Concat(ids, axis) => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis] * inner;
                let mut offset = 0;
                for p in ids {
                    let w = self.nodes[p].value.shape()[axis] * inner;
                    self.accumulate(p, |gp, _| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            add_into(&mut gp[o * w..(o + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice(a, axis, start) => {
                let len = self.nodes[i].value.shape()[axis];
                self.accumulate(a, |ga, x| {
                    let s = x.shape();
                    let outer: usize = s[..axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    for o in 0..outer {
                        let base = (o * s[axis] + start) * inner;
                        add_into(&mut ga[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Transpose(a) => self.accumulate(a, |ga, x| {
                let s = x.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                for blk in 0..ga.len() / (r * c) {
                    let base = blk * r * c;
                    for ii in 0..r {
                        for j in 0..c {
                            ga[base + ii * c + j] += g[base + j * r + ii];
                        }
                    }
                }
            }),
            Op::Reshape(a) => self.accumulate(a, |ga, _| add_into(ga, g)),
        }
    }

    fn backward_binary(&mut self, out: usize, kind: Binary, a: usize, b: usize, g: &[f64]) {
        let out_shape = self.nodes[out].value.shape().to_vec();
        let va = self.nodes[a].value.clone();
        let vb = self.nodes[b].value.clone();
        let (sa, sb) = (va.shape(), vb.shape());
        let (da, db) = (va.data(), vb.data());
        if self.nodes[a].requires_grad {
            self.accumulate(a, |ga, _| {
                for_each_broadcast(&out_shape, sa, sb, |o, i, j| {
                    ga[i] += g[o]
                        * match kind {
                            Binary::Add | Binary::Sub => 1.0,
                            Binary::Mul => db[j],
                            Binary::Div => 1.0 / db[j],
                        };
                });
            });
        }
        if self.nodes[b].requires_grad {
            self.accumulate(b, |gb, _| {
                for_each_broadcast(&out_shape, sa, sb, |o, i, j| {
                    gb[j] += g[o]
                        * match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => -1.0,
                            Binary::Mul => da[i],
                            Binary::Div => -da[i] / (db[j] * db[j]),
                        };
                });
            });
        }
    }

    fn backward_matmul(&mut self, a: usize, b: usize, g: &[f64]) {
        let va = self.nodes[a].value.clone();
        let vb = self.nodes[b].value.clone();
        let geom = MatMulGeom::new(va.shape(), vb.shape()).expect("validated in forward");
        let (m, k, n) = (geom.m, geom.k, geom.n);
        if self.nodes[a].requires_grad {
            self.accumulate(a, |ga, _| {
                for bi in 0..geom.batch {
                    let b_blk = if geom.shared_rhs { vb.data() } else { &vb.data()[bi * k * n..(bi + 1) * k * n] };
                    gemm_nt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        b_blk,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            });
        }
        if self.nodes[b].requires_grad {
            self.accumulate(b, |gb, _| {
                if geom.shared_rhs {
                    // Leading dims of the lhs act as extra rows.
                    gemm_tn_acc(va.data(), g, gb, geom.batch * m, k, n);
                } else {
                    for bi in 0..geom.batch {
                        gemm_tn_acc(
                            &va.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            });
        }
    }
}

struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

impl MatMulGeom {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || Error::Shape {
            op: "matmul",
            detail: format!("{sa:?} x {sb:?}"),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        if sb.len() == 2 {
            Ok(Self { batch, m, k, n, shared_rhs: true })
        } else if sb.len() == sa.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            Ok(Self { batch, m, k, n, shared_rhs: false })
        } else {
            Err(err())
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn split_last(shape: &[usize], op: &'static str) -> Result<(Vec<usize>, usize)> {
    match shape.split_last() {
        Some((&w, rest)) => Ok((rest.to_vec(), w)),
        None => Err(Error::Shape {
            op,
            detail: "scalar input has no last axis".into(),
        }),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// out = a (m x k) * b (k x n)
/// `out += a * x`, unrolled so the compiler emits packed arithmetic. Each
/// element sees the same single multiply-add as a plain loop.
#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    let mut o4 = out.chunks_exact_mut(4);
    let mut x4 = x.chunks_exact(4);
    for (o, x) in (&mut o4).zip(&mut x4) {
        o[0] += a * x[0];
        o[1] += a * x[1];
        o[2] += a * x[2];
        o[3] += a * x[3];
    }
    for (o, x) in o4.into_remainder().iter_mut().zip(x4.remainder()) {
        *o += a * x;
    }
}

fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(orow, av, &b[p * n..(p + 1) * n]);
        }
    }
}

/// out += g (m x n) * b^T where b is (k x n)
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// out += a^T (k x m) * g (m x n) where a is (m x k)
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(&mut out[p * n..(p + 1) * n], av, grow);
        }
    }
}
