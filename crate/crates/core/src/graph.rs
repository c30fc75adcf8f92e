//! Replayable computation record with reverse-mode differentiation.
//!
//! A [`Graph`] is built once as a list of primitive nodes (each node's
//! inputs precede it), then evaluated any number of times with
//! [`Graph::forward`]. Named inputs are bound at evaluation time, which is
//! what lets finite-difference checks replay the same record with
//! perturbed values. Nodes registered with [`Graph::tap`] keep their
//! gradients after [`Graph::backward`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::ops::Range;
use std::sync::Arc;

use crate::compressor::{self, ArgmaxRecord, PoolMode, PoolPlan};
use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors bound to a graph's inputs.
pub type Bindings = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
pub enum Op {
    Input {
        name: String,
        shape: Vec<usize>,
        differentiable: bool,
    },
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// `[m, n] + [n]`, bias broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// Sets entries above the (right-aligned) diagonal to `-inf`.
    CausalMask(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gelu(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Reshape(NodeId, Vec<usize>),
    Slice {
        x: NodeId,
        axis: usize,
        range: Range<usize>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Element {
        x: NodeId,
        index: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Pool {
        x: NodeId,
        plan: Arc<PoolPlan>,
        mode: PoolMode,
    },
    /// Mean token cross-entropy of `[T, V]` logits against `T` targets.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax",
            Op::CausalMask(_) => "causal_mask",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Element { .. } => "element",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Pool { .. } => "pool",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::CausalMask(a)
            | Op::Gelu(a)
            | Op::Reshape(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Slice { x, .. } | Op::Element { x, .. } | Op::Pool { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    inputs: BTreeMap<String, NodeId>,
    taps: BTreeSet<NodeId>,
    values: Vec<Tensor>,
    argmax: HashMap<NodeId, ArgmaxRecord>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        for operand in op.operands() {
            assert!(operand.0 < id.0, "operand {operand:?} does not precede node {id:?}");
        }
        self.nodes.push(op);
        id
    }

    /// Declares a named input. Declaring the same name twice returns the
    /// existing node.
    pub fn input(&mut self, name: &str, shape: &[usize], differentiable: bool) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input {
            name: name.to_string(),
            shape: shape.to_vec(),
            differentiable,
        });
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow(a, bias))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn causal_mask(&mut self, a: NodeId) -> NodeId {
        self.push(Op::CausalMask(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, gamma, beta })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::Embedding { table, ids })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, range: Range<usize>) -> NodeId {
        self.push(Op::Slice { x, axis, range })
    }

    pub fn concat(&mut self, parts: Vec<NodeId>, axis: usize) -> NodeId {
        self.push(Op::Concat { parts, axis })
    }

    pub fn element(&mut self, x: NodeId, index: &[usize]) -> NodeId {
        self.push(Op::Element {
            x,
            index: index.to_vec(),
        })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn pool(&mut self, x: NodeId, plan: Arc<PoolPlan>, mode: PoolMode) -> NodeId {
        self.push(Op::Pool { x, plan, mode })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        self.push(Op::CrossEntropy { logits, targets })
    }

    /// Retains the gradient of `id` after backward.
    pub fn tap(&mut self, id: NodeId) {
        self.taps.insert(id);
    }

    pub fn taps(&self) -> &BTreeSet<NodeId> {
        &self.taps
    }

    pub fn is_evaluated(&self) -> bool {
        !self.nodes.is_empty() && self.values.len() == self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0)
    }

    /// Argmax record of a max-pool node from the last forward pass.
    pub fn argmax(&self, id: NodeId) -> Option<&ArgmaxRecord> {
        self.argmax.get(&id)
    }

    /// Evaluates only nodes appended since the last forward pass, keeping
    /// earlier values. Used to add a readout after inspecting outputs.
    pub fn forward_appended(&mut self, inputs: &Bindings) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::NotEvaluated);
        }
        for i in self.values.len()..self.nodes.len() {
            let value = self.eval(NodeId(i), inputs)?;
            self.values.push(value);
        }
        Ok(())
    }

    pub fn forward(&mut self, inputs: &Bindings) -> Result<()> {
        self.forward_with_overrides(inputs, &HashMap::new())
    }

    /// Evaluates every node; the value of a node listed in `overrides` is
    /// replaced by the given tensor before its consumers run. Overriding a
    /// node cuts it from its operands, which is how intermediate values are
    /// perturbed for finite differences.
    pub fn forward_with_overrides(
        &mut self,
        inputs: &Bindings,
        overrides: &HashMap<NodeId, Tensor>,
    ) -> Result<()> {
        self.values.clear();
        self.argmax.clear();
        self.values.reserve(self.nodes.len());
        for i in 0..self.nodes.len() {
            let id = NodeId(i);
            let mut value = self.eval(id, inputs)?;
            if let Some(o) = overrides.get(&id) {
                if o.shape() != value.shape() {
                    return Err(self.mismatch(id, value.shape(), o.shape()));
                }
                value = o.clone();
            }
            self.values.push(value);
        }
        Ok(())
    }

    fn mismatch(&self, id: NodeId, left: &[usize], right: &[usize]) -> Error {
        Error::ShapeMismatch {
            node: id.0,
            op: self.nodes[id.0].name(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    fn eval(&mut self, id: NodeId, inputs: &Bindings) -> Result<Tensor> {
        let op = &self.nodes[id.0];
        let out = match op {
            Op::Input { name, shape, .. } => {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(self.mismatch(id, shape, t.shape()));
                }
                t.clone()
            }
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                match (a.shape(), b.shape()) {
                    ([m, k], [k2, n]) if k == k2 => matmul_raw(a.data(), b.data(), *m, *k, *n),
                    _ => return Err(self.mismatch(id, a.shape(), b.shape())),
                }
            }
            Op::Transpose(a) => {
                let a = self.val(*a);
                a.transpose().map_err(|_| self.mismatch(id, a.shape(), &[]))?
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() {
                    return Err(self.mismatch(id, a.shape(), b.shape()));
                }
                let f: fn(f64, f64) -> f64 = if matches!(op, Op::Add(..)) {
                    |x, y| x + y
                } else {
                    |x, y| x * y
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::AddRow(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                match (a.shape(), b.shape()) {
                    ([_, n], [n2]) if n == n2 => {
                        let mut out = a.clone();
                        for row in out.data_mut().chunks_mut(*n) {
                            for (o, &bv) in row.iter_mut().zip(b.data()) {
                                *o += bv;
                            }
                        }
                        out
                    }
                    _ => return Err(self.mismatch(id, a.shape(), b.shape())),
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.val(*a).map(|x| x * s)
            }
            Op::Softmax(a) => {
                let a = self.val(*a);
                if a.ndim() == 0 {
                    return Err(self.mismatch(id, a.shape(), &[1]));
                }
                softmax_rows(a)
            }
            Op::CausalMask(a) => {
                let a = self.val(*a);
                let (r, c) = a.dims2().map_err(|_| self.mismatch(id, a.shape(), &[]))?;
                if c < r {
                    return Err(self.mismatch(id, a.shape(), &[r, r]));
                }
                let offset = c - r;
                let mut out = a.clone();
                for i in 0..r {
                    for j in (i + offset + 1)..c {
                        out.data_mut()[i * c + j] = f64::NEG_INFINITY;
                    }
                }
                out
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, g, b) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let d = *x.shape().last().unwrap_or(&0);
                if x.ndim() == 0 || g.shape() != [d] {
                    return Err(self.mismatch(id, x.shape(), g.shape()));
                }
                if b.shape() != [d] {
                    return Err(self.mismatch(id, x.shape(), b.shape()));
                }
                layer_norm(x, g, b).0
            }
            Op::Gelu(a) => self.val(*a).map(gelu),
            Op::Embedding { table, ids } => {
                let t = self.val(*table);
                let (v, d) = t.dims2().map_err(|_| self.mismatch(id, t.shape(), &[]))?;
                let mut out = Vec::with_capacity(ids.len() * d);
                for &tok in ids {
                    if tok >= v {
                        return Err(Error::TokenOutOfVocab { id: tok, vocab: v });
                    }
                    out.extend_from_slice(t.row(tok));
                }
                Tensor::new(vec![ids.len(), d], out)?
            }
            Op::Reshape(a, shape) => {
                let a = self.val(*a);
                a.clone()
                    .reshape(shape)
                    .map_err(|_| self.mismatch(id, a.shape(), shape))?
            }
            Op::Slice { x, axis, range } => {
                let x = self.val(*x);
                slice2(x, *axis, range.clone()).ok_or_else(|| {
                    self.mismatch(id, x.shape(), &[*axis, range.start, range.end])
                })?
            }
            Op::Concat { parts, axis } => {
                let tensors: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                concat2(&tensors, *axis).map_err(|(l, r)| self.mismatch(id, &l, &r))?
            }
            Op::Element { x, index } => {
                let x = self.val(*x);
                let ok = index.len() == x.ndim()
                    && index.iter().zip(x.shape()).all(|(i, d)| i < d);
                if !ok {
                    return Err(self.mismatch(id, x.shape(), index));
                }
                Tensor::scalar(x.get(index))
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Mean(a) => {
                let a = self.val(*a);
                Tensor::scalar(a.sum() / a.len() as f64)
            }
            Op::Pool { x, plan, mode } => {
                let x = self.val(*x);
                let shape_err = |_| self.mismatch(id, x.shape(), &[plan.in_tokens(), 0]);
                match mode {
                    PoolMode::Avg => compressor::pool_avg(x, plan).map_err(shape_err)?,
                    PoolMode::Max => {
                        let r = compressor::pool_max(x, plan).map_err(shape_err)?;
                        self.argmax.insert(id, r.argmax);
                        r.output
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let l = self.val(*logits);
                let (t, v) = l.dims2().map_err(|_| self.mismatch(id, l.shape(), &[]))?;
                if targets.len() != t {
                    return Err(self.mismatch(id, l.shape(), &[targets.len(), v]));
                }
                let mut total = 0.0;
                for (r, &y) in targets.iter().enumerate() {
                    if y >= v {
                        return Err(Error::TokenOutOfVocab { id: y, vocab: v });
                    }
                    let row = l.row(r);
                    total += log_sum_exp(row) - row[y];
                }
                Tensor::scalar(total / t as f64)
            }
        };
        Ok(out)
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, op) in self.nodes.iter().enumerate() {
            needs[i] = match op {
                Op::Input { differentiable, .. } => *differentiable,
                Op::Const(_) => false,
                other => other.operands().iter().any(|o| needs[o.0]),
            } || self.taps.contains(&NodeId(i));
        }
        needs
    }

    /// Propagates `d target / d value` back through the record. `target`
    /// must be a scalar node and forward must have run.
    pub fn backward(&self, target: NodeId) -> Result<Gradients> {
        if !self.is_evaluated() {
            return Err(Error::NotEvaluated);
        }
        if target.0 >= self.nodes.len() {
            return Err(Error::UnknownNode(target.0));
        }
        let tshape = self.val(target).shape();
        if !tshape.is_empty() {
            return Err(Error::NonScalarTarget {
                node: target.0,
                shape: tshape.to_vec(),
            });
        }
        let needs = self.needs_grad();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(Tensor::scalar(1.0));

        for i in (0..=target.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (operand, contribution) in self.vjp(NodeId(i), &g, &needs)? {
                accumulate(&mut grads[operand.0], contribution);
            }
            grads[i] = Some(g);
        }

        let mut kept = HashMap::new();
        for (i, op) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let keep = self.taps.contains(&id)
                || matches!(op, Op::Input { differentiable: true, .. });
            if keep {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.val(id).shape()));
                kept.insert(id, g);
            }
        }
        let names = self
            .inputs
            .iter()
            .filter(|(_, id)| kept.contains_key(id))
            .map(|(n, id)| (n.clone(), *id))
            .collect();
        Ok(Gradients { grads: kept, names })
    }

    /// Vector-Jacobian products of node `id` for each operand that needs a
    /// gradient.
    fn vjp(&self, id: NodeId, g: &Tensor, needs: &[bool]) -> Result<Vec<(NodeId, Tensor)>> {
        let mut out = Vec::new();
        let mut emit = |operand: NodeId, f: &mut dyn FnMut() -> Result<Tensor>| -> Result<()> {
            if needs[operand.0] {
                out.push((operand, f()?));
            }
            Ok(())
        };
        match &self.nodes[id.0] {
            Op::Input { .. } | Op::Const(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                emit(*a, &mut || g.matmul(&bv.transpose()?))?;
                emit(*b, &mut || av.transpose()?.matmul(g))?;
            }
            Op::Transpose(a) => emit(*a, &mut || g.transpose())?,
            Op::Add(a, b) => {
                emit(*a, &mut || Ok(g.clone()))?;
                emit(*b, &mut || Ok(g.clone()))?;
            }
            Op::AddRow(a, b) => {
                emit(*a, &mut || Ok(g.clone()))?;
                emit(*b, &mut || {
                    let n = self.val(*b).len();
                    let mut acc = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    Ok(Tensor::vector(acc))
                })?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                emit(*a, &mut || hadamard(g, bv))?;
                emit(*b, &mut || hadamard(g, av))?;
            }
            Op::Scale(a, s) => emit(*a, &mut || Ok(g.map(|x| x * s)))?,
            Op::Softmax(a) => {
                let y = self.val(id);
                emit(*a, &mut || Ok(softmax_vjp(y, g)))?;
            }
            Op::CausalMask(a) => {
                let y = self.val(id);
                emit(*a, &mut || {
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &yv)| if yv == f64::NEG_INFINITY { 0.0 } else { gv })
                        .collect();
                    Tensor::new(g.shape().to_vec(), data)
                })?;
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xv, gv, bv) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let (_, xhat, inv_std) = layer_norm(xv, gv, bv);
                let d = gv.len();
                emit(*x, &mut || {
                    let mut dx = vec![0.0; xv.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let gr = &g.data()[span.clone()];
                        let xr = &xhat[span.clone()];
                        let dxhat: Vec<f64> =
                            gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for k in 0..d {
                            dx[r * d + k] = inv * (dxhat[k] - m1 - xr[k] * m2);
                        }
                    }
                    Tensor::new(xv.shape().to_vec(), dx)
                })?;
                emit(*gamma, &mut || {
                    let mut acc = vec![0.0; d];
                    for (gr, xr) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for k in 0..d {
                            acc[k] += gr[k] * xr[k];
                        }
                    }
                    Ok(Tensor::vector(acc))
                })?;
                emit(*beta, &mut || {
                    let mut acc = vec![0.0; d];
                    for gr in g.data().chunks(d) {
                        for k in 0..d {
                            acc[k] += gr[k];
                        }
                    }
                    Ok(Tensor::vector(acc))
                })?;
            }
            Op::Gelu(a) => {
                let x = self.val(*a);
                emit(*a, &mut || {
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)
                })?;
            }
            Op::Embedding { table, ids } => {
                let t = self.val(*table);
                emit(*table, &mut || {
                    let mut acc = Tensor::zeros(t.shape());
                    let d = t.shape()[1];
                    for (r, &tok) in ids.iter().enumerate() {
                        let dst = &mut acc.data_mut()[tok * d..(tok + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    Ok(acc)
                })?;
            }
            Op::Reshape(a, _) => {
                let shape = self.val(*a).shape().to_vec();
                emit(*a, &mut || g.clone().reshape(&shape))?;
            }
            Op::Slice { x, axis, range } => {
                let xv = self.val(*x);
                emit(*x, &mut || {
                    let mut acc = Tensor::zeros(xv.shape());
                    let (r, c) = xv.dims2()?;
                    let (_, gc) = g.dims2()?;
                    for i in 0..r {
                        for j in 0..c {
                            let src = match axis {
                                0 if range.contains(&i) => Some((i - range.start) * gc + j),
                                1 if range.contains(&j) => Some(i * gc + j - range.start),
                                _ => None,
                            };
                            if let Some(s) = src {
                                acc.data_mut()[i * c + j] = g.data()[s];
                            }
                        }
                    }
                    Ok(acc)
                })?;
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let extent = pv.shape()[*axis];
                    let range = offset..offset + extent;
                    offset += extent;
                    emit(*p, &mut || {
                        slice2(g, *axis, range.clone())
                            .ok_or_else(|| Error::InvalidShape("concat gradient".into()))
                    })?;
                }
            }
            Op::Element { x, index } => {
                let xv = self.val(*x);
                emit(*x, &mut || {
                    let mut acc = Tensor::zeros(xv.shape());
                    acc.set(index, g.data()[0]);
                    Ok(acc)
                })?;
            }
            Op::Sum(a) => {
                let shape = self.val(*a).shape().to_vec();
                emit(*a, &mut || Ok(Tensor::full(&shape, g.data()[0])))?;
            }
            Op::Mean(a) => {
                let av = self.val(*a);
                let v = g.data()[0] / av.len() as f64;
                emit(*a, &mut || Ok(Tensor::full(av.shape(), v)))?;
            }
            Op::Pool { x, plan, mode } => {
                let argmax = self.argmax.get(&id);
                emit(*x, &mut || compressor::pool_backward(g, plan, *mode, argmax))?;
            }
            Op::CrossEntropy { logits, targets } => {
                let l = self.val(*logits);
                emit(*logits, &mut || {
                    let mut p = softmax_rows(l);
                    let v = l.shape()[1];
                    let scale = g.data()[0] / targets.len() as f64;
                    for (r, &y) in targets.iter().enumerate() {
                        p.data_mut()[r * v + y] -= 1.0;
                    }
                    Ok(p.map(|x| x * scale))
                })?;
            }
        }
        Ok(out)
    }
}

/// Gradients kept after a backward pass: every tap and every
/// differentiable input, zero-filled when off the path to the target.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
    names: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|id| self.grads.get(id))
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        None => *slot = Some(t),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let n = *a.shape().last().expect("softmax of a scalar");
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

fn softmax_vjp(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape().last().expect("softmax of a scalar");
    let mut out = Tensor::zeros(y.shape());
    for ((o, yr), gr) in out
        .data_mut()
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(g.data().chunks(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for k in 0..n {
            o[k] = yr[k] * (gr[k] - dot);
        }
    }
    out
}

/// Returns `(output, xhat, 1/std per row)`.
fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = gamma.len();
    let mut out = x.clone();
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / d.max(1));
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        for k in 0..d {
            let h = (row[k] - mean) * inv;
            xhat[r * d + k] = h;
            row[k] = h * gamma.data()[k] + beta.data()[k];
        }
    }
    (out, xhat, inv_std)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn slice2(x: &Tensor, axis: usize, range: Range<usize>) -> Option<Tensor> {
    let (r, c) = x.dims2().ok()?;
    let extent = if axis == 0 { r } else { c };
    if axis > 1 || range.start > range.end || range.end > extent {
        return None;
    }
    let data: Vec<f64> = if axis == 0 {
        x.data()[range.start * c..range.end * c].to_vec()
    } else {
        (0..r)
            .flat_map(|i| x.data()[i * c + range.start..i * c + range.end].iter().copied())
            .collect()
    };
    let shape = if axis == 0 {
        vec![range.len(), c]
    } else {
        vec![r, range.len()]
    };
    Tensor::new(shape, data).ok()
}

fn concat2(parts: &[&Tensor], axis: usize) -> std::result::Result<Tensor, (Vec<usize>, Vec<usize>)> {
    let first = parts.first().ok_or((vec![], vec![]))?;
    let (r0, c0) = first.dims2().map_err(|_| (first.shape().to_vec(), vec![]))?;
    for p in parts {
        let (r, c) = p.dims2().map_err(|_| (first.shape().to_vec(), p.shape().to_vec()))?;
        let compatible = match axis {
            0 => c == c0,
            1 => r == r0,
            _ => false,
        };
        if !compatible {
            return Err((first.shape().to_vec(), p.shape().to_vec()));
        }
    }
    if axis == 0 {
        let rows = parts.iter().map(|p| p.shape()[0]).sum();
        let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        Ok(Tensor::new(vec![rows, c0], data).expect("concat rows"))
    } else {
        let cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(r0 * cols);
        for i in 0..r0 {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor::new(vec![r0, cols], data).expect("concat cols"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn matmul_forward() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 2], false);
        let b = g.input("b", &[2, 1], false);
        let c = g.matmul(a, b);
        let a_val = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b_val = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        g.forward(&bind(&[("a", a_val), ("b", b_val)])).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.input("x", &[2], false);
        let y = g.softmax(x);
        g.forward(&bind(&[("x", Tensor::vector(vec![0.0, 0.0]))])).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.5, 0.5]);

        // exp(ln 1) / (1 + 3) and exp(ln 3) / (1 + 3)
        g.forward(&bind(&[("x", Tensor::vector(vec![0.0, 3f64.ln()]))])).unwrap();
        let out = g.value(y).unwrap().data();
        assert!((out[0] - 0.25).abs() < 1e-15);
        assert!((out[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", &[], true);
        let y = g.mul(x, x);
        g.forward(&bind(&[("x", Tensor::scalar(3.0))])).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.input("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", &[4], true);
        let s = g.softmax(x);
        let t = g.sum(s);
        g.forward(&bind(&[("x", Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]))])).unwrap();
        let grads = g.backward(t).unwrap();
        for v in grads.input("x").unwrap().data() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.input("x", &[2], true);
        let s = g.sum(x);
        assert!(matches!(g.backward(s), Err(Error::NotEvaluated)));
        g.forward(&bind(&[("x", Tensor::vector(vec![1.0, 2.0]))])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarTarget { .. })));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3], false);
        let b = g.input("b", &[2, 3], false);
        let c = g.matmul(a, b);
        let err = g
            .forward(&bind(&[("a", Tensor::zeros(&[2, 3])), ("b", Tensor::zeros(&[2, 3]))]))
            .unwrap_err();
        match err {
            Error::ShapeMismatch { node, op, left, right } => {
                assert_eq!(node, c.index());
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unbound_input_is_error() {
        let mut g = Graph::new();
        g.input("a", &[1], false);
        assert!(matches!(g.forward(&Bindings::new()), Err(Error::UnboundInput(_))));
    }

    #[test]
    fn off_path_gradient_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", &[3], true);
        let _unused = g.input("u", &[2], true);
        let t = g.sum(x);
        g.forward(&bind(&[
            ("x", Tensor::vector(vec![1.0, 2.0, 3.0])),
            ("u", Tensor::vector(vec![5.0, 6.0])),
        ]))
        .unwrap();
        let grads = g.backward(t).unwrap();
        assert_eq!(grads.input("u").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.input("x").unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut g = Graph::new();
        let x = g.input("x", &[3, 3], false);
        let m = g.causal_mask(x);
        let a = g.softmax(m);
        g.forward(&bind(&[("x", Tensor::full(&[3, 3], 0.4))])).unwrap();
        let a = g.value(a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if j > i {
                    assert_eq!(a.get(&[i, j]), 0.0);
                } else {
                    assert_eq!(a.get(&[i, j]), 1.0 / (i + 1) as f64);
                }
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.input("x", &[2, 3], true);
        let gamma = g.input("g", &[3], true);
        let beta = g.input("b", &[3], true);
        let n = g.layer_norm(x, gamma, beta);
        let e = g.gelu(n);
        let s = g.softmax(e);
        let t = g.element(s, &[1, 2]);
        let b = bind(&[
            ("x", Tensor::new(vec![2, 3], vec![0.1, -0.4, 1.3, 2.0, 0.0, -1.0]).unwrap()),
            ("g", Tensor::vector(vec![1.0, 0.5, -0.2])),
            ("b", Tensor::vector(vec![0.0, 0.1, 0.2])),
        ]);
        g.forward(&b).unwrap();
        let first = (g.value(t).unwrap().clone(), g.backward(t).unwrap());
        g.forward(&b).unwrap();
        let second = (g.value(t).unwrap().clone(), g.backward(t).unwrap());
        assert_eq!(first.0, second.0);
        for name in ["x", "g", "b"] {
            assert_eq!(first.1.input(name), second.1.input(name));
        }
    }
}
