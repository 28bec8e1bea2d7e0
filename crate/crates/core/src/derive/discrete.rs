use super::DerivedArch;
use crate::error::{Error, Result};
use crate::numcore::{op_forward, BnStats, Conv2dGeom, Tape, Tensor, Var};
use crate::searchspace::supernet::ConvBn;
use crate::searchspace::{mixing_weights, BinaryMasks, Mode, Supernet};

/// A derived architecture as a standalone network: only the surviving edges
/// and operations are instantiated, with weights copied from a supernet and
/// weight masks folded into the copied values.
#[derive(Clone, Debug)]
pub struct DiscreteNet {
    net: Supernet,
    arch: DerivedArch,
    /// Operation weights per kind and edge, aligned with `ArchEdge::ops`.
    op_weights: Vec<Vec<Vec<f64>>>,
}

impl DiscreteNet {
    /// `weight_masks` (shaped like [`BinaryMasks::w`]) are multiplied into the
    /// copied weights.
    pub fn new(net: &Supernet, arch: &DerivedArch, weight_masks: Option<&BinaryMasks>) -> Result<Self> {
        let spec = net.spec();
        if arch.ops != spec.ops || arch.intermediate_nodes != spec.intermediate_nodes() || arch.cells.len() != spec.kinds().len() {
            return Err(Error::Spec("derived architecture does not belong to this search space".into()));
        }
        let mut net = net.clone();
        if let Some(m) = weight_masks {
            m.check_shapes(&net)?;
            for (p, mw) in net.weights.params.iter_mut().zip(&m.w) {
                if let Some(mw) = mw {
                    p.value.data_mut().iter_mut().zip(mw.data()).for_each(|(v, m)| *v *= m);
                }
            }
        }
        let n = spec.num_candidate_ops();
        let topo = spec.topology();
        let op_weights = arch
            .cells
            .iter()
            .enumerate()
            .map(|(k, cell)| {
                cell.edges
                    .iter()
                    .map(|e| {
                        let idx = topo.edge_index(e.node, e.pred).expect("edge within topology");
                        let mut keep = vec![0.0; n];
                        e.ops.iter().for_each(|&o| keep[o] = 1.0);
                        let w = mixing_weights(&net.arch.alpha[k].data()[idx * n..(idx + 1) * n], Some(&keep));
                        e.ops.iter().map(|&o| w[o]).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { net, arch: arch.clone(), op_weights })
    }

    fn stats(&self, buffer: usize, mode: Mode) -> BnStats {
        match mode {
            Mode::Eval => {
                let b = &self.net.weights.buffers[buffer];
                BnStats::Running { mean: b.mean.clone(), var: b.var.clone() }
            }
            _ => BnStats::Batch,
        }
    }

    pub fn forward(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p: Vec<Var> = self.net.weights.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let layout = &self.net.layout;
        let x = tape.constant(batch.clone());

        let conv_bn = |tape: &mut Tape, l: &ConvBn, x: Var, relu: bool| -> Result<Var> {
            let h = if relu { tape.relu(x)? } else { x };
            let k = tape.value(p[l.conv]).shape()[2];
            let h = tape.conv2d(h, p[l.conv], Conv2dGeom::new(l.stride, k / 2, 1, 1))?;
            tape.batch_norm(h, Some(p[l.gamma]), Some(p[l.beta]), self.stats(l.buffer, mode))
        };

        let stem = conv_bn(&mut tape, &layout.stem, x, false)?;
        let (mut s_pp, mut s_p) = (stem, stem);
        for cell in &layout.cells {
            let inputs = [conv_bn(&mut tape, &cell.pre[0], s_p, true)?, conv_bn(&mut tape, &cell.pre[1], s_pp, true)?];
            let arch = &self.arch.cells[cell.kind];
            let mut states: Vec<Option<Var>> = vec![Some(inputs[0]), Some(inputs[1])];
            let (b, _, h, w) = tape.value(inputs[0]).dims4("cell input")?;
            let reduction = cell.edges[0][0].spec.stride == 2;
            let shape = if reduction { [b, cell.channels, h.div_ceil(2), w.div_ceil(2)] } else { [b, cell.channels, h, w] };
            for node in 0..self.arch.intermediate_nodes {
                let mut acc: Option<Var> = None;
                for (i, e) in arch.edges.iter().enumerate().filter(|(_, e)| e.node == node) {
                    let idx = self.arch.topology().edge_index(e.node, e.pred).expect("edge within topology");
                    let input = match states[e.pred] {
                        Some(v) => v,
                        None => tape.constant(Tensor::zeros(&shape)),
                    };
                    for (j, &o) in e.ops.iter().enumerate() {
                        let op = &cell.edges[idx][o];
                        let params: Vec<Var> = op.params.clone().map(|i| p[i]).collect();
                        let stats: Vec<BnStats> = op.buffers.clone().map(|b| self.stats(b, mode)).collect();
                        let y = op_forward(&mut tape, &op.spec, input, &params, &stats)?.out;
                        let y = tape.scale(y, e.importance * self.op_weights[cell.kind][i][j])?;
                        acc = Some(match acc {
                            Some(a) => tape.add(a, y)?,
                            None => y,
                        });
                    }
                }
                states.push(acc);
            }
            let outs: Vec<Var> = states[2..]
                .iter()
                .map(|s| s.unwrap_or_else(|| tape.constant(Tensor::zeros(&shape))))
                .collect();
            s_pp = s_p;
            s_p = tape.concat_channels(&outs)?;
        }
        let pooled = tape.global_avg_pool(s_p)?;
        let logits = tape.linear(pooled, p[layout.head_w], Some(p[layout.head_b]))?;
        Ok(tape.value(logits).clone())
    }
}
