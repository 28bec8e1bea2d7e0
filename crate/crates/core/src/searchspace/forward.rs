use serde::{Deserialize, Serialize};

use super::supernet::{ConvBn, ParamRole, Supernet};
use crate::error::{Error, Result};
use crate::numcore::{op_forward, BnStats, Conv2dGeom, Tape, Tensor, Var};

/// Batch-norm behaviour for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the pass reports them so running statistics can be updated.
    Train,
    /// Batch statistics without touching running statistics.
    BatchStats,
    /// Running statistics.
    Eval,
}

/// Binary `{0, 1}` masks over operations, edges and maskable weights.
///
/// `alpha[k]`/`beta[k]` mirror the architecture logits of cell kind `k`;
/// `w[i]` is present exactly for maskable parameter `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMasks {
    pub alpha: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub w: Vec<Option<Tensor>>,
}

impl BinaryMasks {
    pub fn ones(net: &Supernet) -> Self {
        Self {
            alpha: net.arch.alpha.iter().map(|a| Tensor::full(a.shape(), 1.0)).collect(),
            beta: net.arch.beta.iter().map(|b| Tensor::full(b.shape(), 1.0)).collect(),
            w: net
                .weights
                .params
                .iter()
                .map(|p| match p.role {
                    ParamRole::Op { maskable: true, .. } => Some(Tensor::full(p.value.shape(), 1.0)),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn check_shapes(&self, net: &Supernet) -> Result<()> {
        let ok = self.alpha.len() == net.arch.alpha.len()
            && self.beta.len() == net.arch.beta.len()
            && self.alpha.iter().zip(&net.arch.alpha).all(|(m, a)| m.shape() == a.shape())
            && self.beta.iter().zip(&net.arch.beta).all(|(m, b)| m.shape() == b.shape())
            && self.w.len() == net.weights.params.len()
            && self.w.iter().zip(&net.weights.params).all(|(m, p)| match (m, p.role) {
                (Some(m), ParamRole::Op { maskable: true, .. }) => m.shape() == p.value.shape(),
                (None, ParamRole::Op { maskable: true, .. }) => false,
                (None, _) => true,
                (Some(_), _) => false,
            });
        if ok {
            Ok(())
        } else {
            Err(Error::dim("masks", "shapes of the supernet parameters", "mismatched masks"))
        }
    }

    /// Whether edge `edge` of cell kind `kind` survives: its edge mask is set
    /// and at least one of its operations survives.
    pub fn edge_alive(&self, kind: usize, edge: usize) -> bool {
        let n = self.alpha[kind].shape()[1];
        self.beta[kind].data()[edge] != 0.0 && self.alpha[kind].data()[edge * n..(edge + 1) * n].iter().any(|&m| m != 0.0)
    }

    pub fn op_alive(&self, kind: usize, edge: usize, op: usize) -> bool {
        let n = self.alpha[kind].shape()[1];
        self.beta[kind].data()[edge] != 0.0 && self.alpha[kind].data()[edge * n + op] != 0.0
    }
}

/// Tape handles for the network parameters.
#[derive(Clone, Debug)]
pub struct Binding {
    pub params: Vec<Var>,
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
}

/// Tape handles for binary masks.
#[derive(Clone, Debug)]
pub struct MaskBinding {
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
    pub w: Vec<Option<Var>>,
    /// When set, every masked-out term is still evaluated so mask gradients exist.
    pub needs_grad: bool,
}

impl BinaryMasks {
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> MaskBinding {
        MaskBinding {
            alpha: self.alpha.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect(),
            beta: self.beta.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect(),
            w: self
                .w
                .iter()
                .map(|m| m.as_ref().map(|t| tape.leaf(t.clone(), requires_grad)))
                .collect(),
            needs_grad: requires_grad,
        }
    }
}

/// Batch mean and biased variance observed at one normalisation layer.
#[derive(Clone, Debug)]
pub struct BatchStat {
    pub buffer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

/// Collects the statistics of the batch-norm nodes recorded by a training pass.
pub fn collect_batch_stats(tape: &Tape, bn_nodes: &[(usize, Var)]) -> Vec<BatchStat> {
    bn_nodes
        .iter()
        .filter_map(|&(buffer, node)| {
            let (mean, var) = tape.batch_stats(node)?;
            let s = tape.value(node).shape();
            Some(BatchStat {
                buffer,
                mean: mean.to_vec(),
                var: var.to_vec(),
                count: s[0] * s[2] * s[3],
            })
        })
        .collect()
}

/// Result of a tape forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// `(buffer index, batch-norm node)` for every batch-statistics normalisation.
    pub bn_nodes: Vec<(usize, Var)>,
}

/// Softmax-weighted combination of terms, with masked renormalisation.
///
/// Computes `weights = mask ⊙ softmax(logits) / Σ(mask ⊙ softmax(logits))` and
/// returns `Σ_i weights[i] · term(i)`. Terms whose weight is exactly zero are
/// not evaluated unless `keep_zero_terms` is set (needed for mask gradients).
/// An all-zero mask yields a zero tensor of `shape`.
pub fn mixed_op_forward<F>(
    tape: &mut Tape,
    logits: Var,
    mask: Option<Var>,
    shape: &[usize],
    keep_zero_terms: bool,
    mut term: F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, usize) -> Result<Var>,
{
    let weights = tape.masked_softmax(logits, mask)?;
    let w = tape.value(weights).data().to_vec();
    let mut terms = Vec::with_capacity(w.len());
    for (i, &wi) in w.iter().enumerate() {
        terms.push(if wi == 0.0 && !keep_zero_terms {
            None
        } else {
            Some(term(tape, i)?)
        });
    }
    tape.weighted_sum(weights, &terms, shape)
}

/// Combination of a node's incoming edge outputs weighted by softmax over its
/// edge logits; identical arithmetic to [`mixed_op_forward`] one level up.
pub fn node_forward(
    tape: &mut Tape,
    edge_outputs: &[Var],
    edge_logits: Var,
    edge_mask: Option<Var>,
) -> Result<Var> {
    let shape = tape.value(edge_outputs[0]).shape().to_vec();
    mixed_op_forward(tape, edge_logits, edge_mask, &shape, true, |_, i| Ok(edge_outputs[i]))
}

/// Post-softmax mixing weights with masked renormalisation, outside any tape.
pub fn mixing_weights(logits: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(logits.to_vec()));
    let m = mask.map(|m| tape.constant(Tensor::from_vec(m.to_vec())));
    let w = tape.masked_softmax(l, m).expect("matching lengths");
    tape.value(w).data().to_vec()
}

impl Supernet {
    /// Records the parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, grad_weights: bool, grad_arch: bool) -> Binding {
        Binding {
            params: self
                .weights
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), grad_weights))
                .collect(),
            alpha: self.arch.alpha.iter().map(|a| tape.leaf(a.clone(), grad_arch)).collect(),
            beta: self.arch.beta.iter().map(|b| tape.leaf(b.clone(), grad_arch)).collect(),
        }
    }

    fn bn_stats(&self, buffer: usize, mode: Mode) -> BnStats {
        match mode {
            Mode::Train | Mode::BatchStats => BnStats::Batch,
            Mode::Eval => {
                let b = &self.weights.buffers[buffer];
                BnStats::Running {
                    mean: b.mean.clone(),
                    var: b.var.clone(),
                }
            }
        }
    }

    fn conv_bn(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        layer: &ConvBn,
        x: Var,
        relu_first: bool,
        mode: Mode,
        bn_nodes: &mut Vec<(usize, Var)>,
    ) -> Result<Var> {
        let h = if relu_first { tape.relu(x)? } else { x };
        let k = tape.value(bind.params[layer.conv]).shape()[2];
        let h = tape.conv2d(h, bind.params[layer.conv], Conv2dGeom::new(layer.stride, k / 2, 1, 1))?;
        let y = tape.batch_norm(
            h,
            Some(bind.params[layer.gamma]),
            Some(bind.params[layer.beta]),
            self.bn_stats(layer.buffer, mode),
        )?;
        if mode == Mode::Train {
            bn_nodes.push((layer.buffer, y));
        }
        Ok(y)
    }

    /// Full forward pass on the tape. Masks, when given, multiply maskable
    /// weights elementwise and gate the post-softmax mixing weights.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        masks: Option<&MaskBinding>,
        x: Var,
        mode: Mode,
    ) -> Result<ForwardPass> {
        let spec = self.spec();
        let (batch, cin, h, w) = tape.value(x).dims4("supernet input")?;
        if cin != spec.input_channels {
            return Err(Error::dim("supernet input channels", spec.input_channels, cin));
        }
        let min_side = spec.min_input_side();
        if h < min_side || w < min_side {
            return Err(Error::dim("supernet input spatial size", format!(">= {min_side}"), (h, w)));
        }
        let keep_zero = masks.is_some_and(|m| m.needs_grad);
        let topo = spec.topology();
        let n_ops = spec.num_candidate_ops();
        let mut bn_nodes = Vec::new();

        let stem = self.conv_bn(tape, bind, &self.layout.stem, x, false, mode, &mut bn_nodes)?;
        let (mut s_pp, mut s_p) = (stem, stem);
        for cell in &self.layout.cells {
            let p0 = self.conv_bn(tape, bind, &cell.pre[0], s_p, true, mode, &mut bn_nodes)?;
            let p1 = self.conv_bn(tape, bind, &cell.pre[1], s_pp, true, mode, &mut bn_nodes)?;
            let (_, _, ph, pw) = tape.value(p0).dims4("cell input")?;
            let reduction = cell.edges[0][0].spec.stride == 2;
            let (oh, ow) = if reduction { (ph.div_ceil(2), pw.div_ceil(2)) } else { (ph, pw) };
            let shape = [batch, cell.channels, oh, ow];
            let mut states = vec![p0, p1];
            for node in 0..topo.intermediate_nodes() {
                let range = topo.node_edges(node);
                let beta = tape.slice(bind.beta[cell.kind], range.start, range.len())?;
                let beta_mask = match masks {
                    Some(m) => Some(tape.slice(m.beta[cell.kind], range.start, range.len())?),
                    None => None,
                };
                let out = mixed_op_forward(tape, beta, beta_mask, &shape, keep_zero, |tape, j| {
                    let edge = range.start + j;
                    let input = states[j];
                    let alpha = tape.slice(bind.alpha[cell.kind], edge * n_ops, n_ops)?;
                    let alpha_mask = match masks {
                        Some(m) => Some(tape.slice(m.alpha[cell.kind], edge * n_ops, n_ops)?),
                        None => None,
                    };
                    mixed_op_forward(tape, alpha, alpha_mask, &shape, keep_zero, |tape, o| {
                        let op = &cell.edges[edge][o];
                        let mut params = Vec::with_capacity(op.params.len());
                        for pi in op.params.clone() {
                            let p = match masks.and_then(|m| m.w[pi]) {
                                Some(mw) => tape.mul(bind.params[pi], mw)?,
                                None => bind.params[pi],
                            };
                            params.push(p);
                        }
                        let stats: Vec<BnStats> = op.buffers.clone().map(|b| self.bn_stats(b, mode)).collect();
                        let out = op_forward(tape, &op.spec, input, &params, &stats)?;
                        if mode == Mode::Train {
                            bn_nodes.extend(op.buffers.clone().zip(out.bn_nodes));
                        }
                        Ok(out.out)
                    })
                })?;
                states.push(out);
            }
            s_pp = s_p;
            s_p = tape.concat_channels(&states[2..])?;
        }
        let pooled = tape.global_avg_pool(s_p)?;
        let logits = tape.linear(pooled, bind.params[self.layout.head_w], Some(bind.params[self.layout.head_b]))?;
        Ok(ForwardPass { logits, bn_nodes })
    }

    /// Folds batch statistics of a training pass into the running statistics
    /// (exponential moving average, momentum 0.1, unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[BatchStat]) {
        const MOMENTUM: f64 = 0.1;
        for st in stats {
            let unbias = if st.count > 1 { st.count as f64 / (st.count - 1) as f64 } else { 1.0 };
            let b = &mut self.weights.buffers[st.buffer];
            for c in 0..st.mean.len() {
                b.mean[c] = (1.0 - MOMENTUM) * b.mean[c] + MOMENTUM * st.mean[c];
                b.var[c] = (1.0 - MOMENTUM) * b.var[c] + MOMENTUM * st.var[c] * unbias;
            }
        }
    }

    /// Logits for `batch`, optionally under binary masks. Never mutates the supernet.
    pub fn forward(&self, batch: &Tensor, masks: Option<&BinaryMasks>, mode: Mode) -> Result<Tensor> {
        if let Some(m) = masks {
            m.check_shapes(self)?;
        }
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, false, false);
        let mb = masks.map(|m| m.bind(&mut tape, false));
        let x = tape.constant(batch.clone());
        let pass = self.forward_tape(&mut tape, &bind, mb.as_ref(), x, mode)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Number of scalar weights; under masks, only weights that survive their
    /// weight mask and belong to a surviving operation on a surviving edge.
    pub fn count_params(&self, masks: Option<&BinaryMasks>) -> usize {
        let Some(m) = masks else {
            return self.total_scalars();
        };
        self.weights
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| match p.role {
                ParamRole::Global => p.value.len(),
                ParamRole::Op { cell, edge, op, .. } => {
                    let kind = self.cell_kind_index(cell);
                    if !m.op_alive(kind, edge, op) {
                        0
                    } else if let Some(mw) = &m.w[i] {
                        mw.data().iter().filter(|&&v| v != 0.0).count()
                    } else {
                        p.value.len()
                    }
                }
            })
            .sum()
    }

    /// True when, under `masks`, the classifier input no longer depends on the
    /// network input (every path through some cell has been cut).
    pub fn is_degenerate(&self, masks: &BinaryMasks) -> bool {
        let topo = self.spec().topology();
        let (mut live_pp, mut live_p) = (true, true);
        for cell in &self.layout.cells {
            let mut live = vec![live_p, live_pp];
            for node in 0..topo.intermediate_nodes() {
                let r = topo.node_edges(node);
                let alive = r.clone().any(|e| masks.edge_alive(cell.kind, e) && live[e - r.start]);
                live.push(alive);
            }
            live_pp = live_p;
            live_p = live[2..].iter().any(|&l| l);
        }
        !live_p
    }
}
