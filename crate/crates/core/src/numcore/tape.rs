//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each recorded node stores its output value, the primitive that produced it
//! and whatever intermediates the backward pass needs. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, BnSaved, Conv2dGeom, PoolKind};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

/// Source of normalisation statistics for a batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub enum BnStats {
    Batch,
    Running { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: Conv2dGeom,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        stats: BnStats,
    },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
        mask: Option<Var>,
    },
    WeightedSum {
        weights: Var,
        terms: Vec<Option<Var>>,
        shape: Vec<usize>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Clone, Debug)]
enum Saved {
    None,
    ArgMax(Vec<usize>),
    Bn(BnSaved),
    Softmax { exps: Vec<f64>, sums: Vec<f64> },
    Probs(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    saved: Saved,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Provenance);
        }
        self.nodes.get(v.idx).ok_or(Error::Provenance)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, Saved::None, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, saved: Saved, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            saved,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        for input in op_inputs(&op) {
            self.check(input)?;
        }
        let requires_grad = op_inputs(&op).into_iter().any(|v| self.nodes[v.idx].requires_grad);
        let (value, saved) = self.compute(&op)?;
        Ok(self.push(value, op, saved, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu(x))
    }

    /// Grouped 2-D convolution; `w` is `(out, in / groups, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: Conv2dGeom) -> Result<Var> {
        self.record(Op::Conv2d { x, w, geom })
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        self.record(Op::Pool {
            x,
            kind: PoolKind::Max,
            kernel,
            stride,
            pad,
        })
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        self.record(Op::Pool {
            x,
            kind: PoolKind::Avg,
            kernel,
            stride,
            pad,
        })
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, stats: BnStats) -> Result<Var> {
        self.record(Op::BatchNorm { x, gamma, beta, stats })
    }

    /// Per-channel `(mean, biased variance)` computed by a batch-statistics batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.idx].saved {
            Saved::Bn(s) if s.batch_stats => Some((&s.mean, &s.var)),
            _ => None,
        }
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.record(Op::Concat(xs.to_vec()))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.record(Op::GlobalAvgPool(x))
    }

    /// `x (B, F) · wᵀ (F, O) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.record(Op::Linear { x, w, b })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Softmax { x, mask: None })
    }

    /// Softmax along the last axis, multiplied by `mask` and renormalised over
    /// surviving entries. A row whose mask is all zero yields zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<Var>) -> Result<Var> {
        self.record(Op::Softmax { x, mask })
    }

    /// `Σ_i weights[i] · terms[i]`; `None` terms contribute nothing.
    pub fn weighted_sum(&mut self, weights: Var, terms: &[Option<Var>], shape: &[usize]) -> Result<Var> {
        self.record(Op::WeightedSum {
            weights,
            terms: terms.to_vec(),
            shape: shape.to_vec(),
        })
    }

    /// Contiguous flat slice as a rank-1 tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::Slice { x, start, len })
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.record(Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    fn compute(&self, op: &Op) -> Result<(Tensor, Saved)> {
        let val = |v: &Var| &self.nodes[v.idx].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape() != b.shape() {
                    return Err(Error::dim("elementwise", a.shape(), b.shape()));
                }
                let f: fn(f64, f64) -> f64 = if matches!(op, Op::Add(..)) {
                    |x, y| x + y
                } else {
                    |x, y| x * y
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                (Tensor::new(a.shape().to_vec(), data)?, Saved::None)
            }
            Op::Scale(x, c) => (val(x).map(|v| v * c), Saved::None),
            Op::Relu(x) => (val(x).map(|v| v.max(0.0)), Saved::None),
            Op::Conv2d { x, w, geom } => (kernels::conv2d_forward(val(x), val(w), *geom)?, Saved::None),
            Op::Pool {
                x,
                kind,
                kernel,
                stride,
                pad,
            } => {
                let (out, arg) = kernels::pool_forward(val(x), *kind, *kernel, *stride, *pad)?;
                (out, Saved::ArgMax(arg))
            }
            Op::BatchNorm { x, gamma, beta, stats } => {
                let running = match stats {
                    BnStats::Batch => None,
                    BnStats::Running { mean, var } => Some((mean.as_slice(), var.as_slice())),
                };
                let (out, saved) = kernels::batch_norm_forward(
                    val(x),
                    gamma.as_ref().map(|g| val(g).data()),
                    beta.as_ref().map(|b| val(b).data()),
                    running,
                )?;
                (out, Saved::Bn(saved))
            }
            Op::Concat(xs) => {
                let first = val(&xs[0]);
                let (b, _, h, w) = first.dims4("concat_channels")?;
                let mut total = 0;
                for v in xs {
                    let (bb, c, hh, ww) = val(v).dims4("concat_channels")?;
                    if (bb, hh, ww) != (b, h, w) {
                        return Err(Error::dim("concat_channels", (b, h, w), (bb, hh, ww)));
                    }
                    total += c;
                }
                let mut out = Vec::with_capacity(b * total * h * w);
                for bi in 0..b {
                    for v in xs {
                        let t = val(v);
                        let plane = t.shape()[1] * h * w;
                        out.extend_from_slice(&t.data()[bi * plane..(bi + 1) * plane]);
                    }
                }
                (Tensor::new(vec![b, total, h, w], out)?, Saved::None)
            }
            Op::GlobalAvgPool(x) => {
                let t = val(x);
                let (b, c, h, w) = t.dims4("global_avg_pool")?;
                let hw = h * w;
                let out = t.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
                (Tensor::new(vec![b, c], out)?, Saved::None)
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (val(x), val(w));
                let (bs, f) = xt.dims2("linear")?;
                let (o, fw) = wt.dims2("linear weight")?;
                if f != fw {
                    return Err(Error::dim("linear", f, fw));
                }
                if let Some(bv) = b {
                    if val(bv).len() != o {
                        return Err(Error::dim("linear bias", o, val(bv).len()));
                    }
                }
                let mut out = vec![0.0; bs * o];
                for r in 0..bs {
                    let xr = &xt.data()[r * f..(r + 1) * f];
                    for j in 0..o {
                        let wr = &wt.data()[j * f..(j + 1) * f];
                        let mut s = b.map_or(0.0, |bv| val(&bv).data()[j]);
                        for k in 0..f {
                            s += xr[k] * wr[k];
                        }
                        out[r * o + j] = s;
                    }
                }
                (Tensor::new(vec![bs, o], out)?, Saved::None)
            }
            Op::Softmax { x, mask } => {
                let (out, exps, sums) = kernels::softmax_forward(val(x), mask.as_ref().map(val))?;
                (out, Saved::Softmax { exps, sums })
            }
            Op::WeightedSum { weights, terms, shape } => {
                let wv = val(weights);
                if wv.len() != terms.len() {
                    return Err(Error::dim("weighted_sum", terms.len(), wv.len()));
                }
                let mut out = Tensor::zeros(shape);
                for (i, t) in terms.iter().enumerate() {
                    if let Some(t) = t {
                        let tv = val(t);
                        if tv.shape() != shape.as_slice() {
                            return Err(Error::dim("weighted_sum term", shape, tv.shape()));
                        }
                        let c = wv.data()[i];
                        for (o, &v) in out.data_mut().iter_mut().zip(tv.data()) {
                            *o += c * v;
                        }
                    }
                }
                (out, Saved::None)
            }
            Op::Slice { x, start, len } => {
                let t = val(x);
                if start + len > t.len() || *len == 0 {
                    return Err(Error::dim("slice", t.len(), start + len));
                }
                (Tensor::from_vec(t.data()[*start..start + len].to_vec()), Saved::None)
            }
            Op::CrossEntropy { logits, labels } => {
                let (loss, probs) = kernels::cross_entropy_forward(val(logits), labels)?;
                (Tensor::scalar(loss), Saved::Probs(probs))
            }
            Op::Sum(x) => (Tensor::scalar(val(x).data().iter().sum()), Saved::None),
        })
    }

    /// Re-evaluates every recorded primitive from the stored input values and
    /// reports whether each output is reproduced bit-exactly.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let (value, _) = self.compute(&node.op)?;
            if !value.bit_eq(&node.value) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.check(loss)?;
        if !node.value.is_scalar() {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                got: node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);
        for i in (0..=loss.idx).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let requires = self.nodes.iter().map(|n| n.requires_grad).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
            requires,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: &Var| &nodes[v.idx].value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.idx].requires_grad {
                return;
            }
            match &mut grads[v.idx] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(x).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = kernels::conv2d_backward(val(x), val(w), *geom, g);
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::Pool {
                x,
                kind,
                kernel,
                stride,
                pad,
            } => {
                let arg = match &node.saved {
                    Saved::ArgMax(a) => a.as_slice(),
                    _ => &[],
                };
                acc(*x, kernels::pool_backward(val(x), *kind, *kernel, *stride, *pad, arg, g));
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                let Saved::Bn(saved) = &node.saved else { unreachable!() };
                let (gx, gg, gb) =
                    kernels::batch_norm_backward(val(x).shape(), gamma.as_ref().map(|v| val(v).data()), saved, g);
                acc(*x, gx);
                if let Some(gm) = gamma {
                    acc(*gm, gg);
                }
                if let Some(bt) = beta {
                    acc(*bt, gb);
                }
            }
            Op::Concat(xs) => {
                let s = node.value.shape();
                let (b, hw) = (s[0], s[2] * s[3]);
                let total = s[1];
                let mut offset = 0;
                for v in xs {
                    let c = val(v).shape()[1];
                    let mut gx = Vec::with_capacity(b * c * hw);
                    for bi in 0..b {
                        let start = (bi * total + offset) * hw;
                        gx.extend_from_slice(&g[start..start + c * hw]);
                    }
                    acc(*v, gx);
                    offset += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = val(x).shape();
                let hw = s[2] * s[3];
                let mut gx = vec![0.0; val(x).len()];
                for (p, chunk) in gx.chunks_mut(hw).enumerate() {
                    chunk.fill(g[p] / hw as f64);
                }
                acc(*x, gx);
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (val(x), val(w));
                let (bs, f) = (xt.shape()[0], xt.shape()[1]);
                let o = wt.shape()[0];
                let mut gx = vec![0.0; bs * f];
                let mut gw = vec![0.0; o * f];
                let mut gb = vec![0.0; o];
                for r in 0..bs {
                    for j in 0..o {
                        let go = g[r * o + j];
                        gb[j] += go;
                        for k in 0..f {
                            gx[r * f + k] += go * wt.data()[j * f + k];
                            gw[j * f + k] += go * xt.data()[r * f + k];
                        }
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
                if let Some(bv) = b {
                    acc(*bv, gb);
                }
            }
            Op::Softmax { x, mask } => {
                let Saved::Softmax { exps, sums } = &node.saved else { unreachable!() };
                let (gx, gm) = kernels::softmax_backward(node.value.data(), exps, sums, g);
                acc(*x, gx);
                if let Some(m) = mask {
                    acc(*m, gm);
                }
            }
            Op::WeightedSum { weights, terms, .. } => {
                let wv = val(weights).data();
                let mut gw = vec![0.0; terms.len()];
                for (i, t) in terms.iter().enumerate() {
                    if let Some(t) = t {
                        let tv = val(t).data();
                        gw[i] = g.iter().zip(tv).map(|(g, v)| g * v).sum();
                        if nodes[t.idx].requires_grad {
                            acc(*t, g.iter().map(|g| g * wv[i]).collect());
                        }
                    }
                }
                acc(*weights, gw);
            }
            Op::Slice { x, start, len } => {
                let mut gx = vec![0.0; val(x).len()];
                gx[*start..start + len].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::CrossEntropy { logits, labels } => {
                let Saved::Probs(p) = &node.saved else { unreachable!() };
                let b = labels.len();
                let classes = p.len() / b;
                let mut gx: Vec<f64> = p.iter().map(|v| v * g[0] / b as f64).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * classes + l] -= g[0] / b as f64;
                }
                acc(*logits, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(x).len()]),
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(x, _) | Op::Relu(x) | Op::GlobalAvgPool(x) | Op::Sum(x) => vec![*x],
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::Pool { x, .. } | Op::Slice { x, .. } => vec![*x],
        Op::BatchNorm { x, gamma, beta, .. } => std::iter::once(*x).chain(*gamma).chain(*beta).collect(),
        Op::Concat(xs) => xs.clone(),
        Op::Linear { x, w, b } => std::iter::once(*x).chain(Some(*w)).chain(*b).collect(),
        Op::Softmax { x, mask } => std::iter::once(*x).chain(*mask).collect(),
        Op::WeightedSum { weights, terms, .. } => std::iter::once(*weights).chain(terms.iter().flatten().copied()).collect(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; all zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable from another tape");
        let shape = &self.shapes[v.idx];
        match &self.grads[v.idx] {
            Some(g) if self.requires[v.idx] => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            _ => Tensor::zeros(shape),
        }
    }

    /// Borrowing variant of [`Gradients::get`]; `None` when no gradient reached `v`.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.idx].as_deref().filter(|_| self.requires[v.idx])
    }
}
