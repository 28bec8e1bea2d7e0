use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::spec::{CellKind, SearchSpaceSpec};
use crate::error::{Error, Result};
use crate::numcore::{OpSpec, Tensor};
use crate::seed::{self, tags};

/// Scale applied to the uniform draw of architecture logits.
pub const ARCH_INIT_SCALE: f64 = 1e-3;

/// Operation (`alpha`, `[edges × N]`) and edge (`beta`, `[edges]`) mixing
/// logits, one pair per cell kind present in the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub alpha: Vec<Tensor>,
    pub beta: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    /// Stem, input preprocessing and classifier head; never masked.
    Global,
    Op {
        cell: usize,
        edge: usize,
        op: usize,
        maskable: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnBuffer {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnBuffer {
    fn fresh(name: String, channels: usize) -> Self {
        Self {
            name,
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn reset(&mut self) {
        self.mean.fill(0.0);
        self.var.fill(1.0);
    }
}

/// Trainable weights `w` plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub params: Vec<Param>,
    pub buffers: Vec<BnBuffer>,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBn {
    pub conv: usize,
    pub gamma: usize,
    pub beta: usize,
    pub buffer: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct OpLayout {
    pub spec: OpSpec,
    pub params: Range<usize>,
    pub buffers: Range<usize>,
}

#[derive(Clone, Debug)]
pub(crate) struct CellLayout {
    pub kind: usize,
    pub channels: usize,
    /// Preprocessing of `c_{k-1}` and `c_{k-2}`, in predecessor order.
    pub pre: [ConvBn; 2],
    pub edges: Vec<Vec<OpLayout>>,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub stem: ConvBn,
    pub cells: Vec<CellLayout>,
    pub head_w: usize,
    pub head_b: usize,
}

/// The over-parameterised network containing every candidate operation on
/// every edge of every cell.
#[derive(Clone, Debug)]
pub struct Supernet {
    spec: SearchSpaceSpec,
    pub arch: ArchParams,
    pub weights: Weights,
    pub(crate) layout: Layout,
}

struct Builder<'a, R: Rng> {
    params: Vec<Param>,
    buffers: Vec<BnBuffer>,
    rng: Option<&'a mut R>,
}

impl<R: Rng> Builder<'_, R> {
    fn tensor(&mut self, shape: &[usize], fan_in: Option<usize>, fill: f64) -> Tensor {
        match (fan_in, self.rng.as_deref_mut()) {
            (Some(fan_in), Some(rng)) => {
                let std = (2.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
                Tensor::new(shape.to_vec(), data).expect("shape")
            }
            _ => Tensor::full(shape, fill),
        }
    }

    fn param(&mut self, name: String, shape: &[usize], fan_in: Option<usize>, fill: f64, role: ParamRole) -> usize {
        let value = self.tensor(shape, fan_in, fill);
        self.params.push(Param { name, value, role });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, channels: usize) -> usize {
        self.buffers.push(BnBuffer::fresh(name, channels));
        self.buffers.len() - 1
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        ConvBn {
            conv: self.param(format!("{prefix}.conv"), &[cout, cin, k, k], Some(cin * k * k), 0.0, ParamRole::Global),
            gamma: self.param(format!("{prefix}.bn.gamma"), &[cout], None, 1.0, ParamRole::Global),
            beta: self.param(format!("{prefix}.bn.beta"), &[cout], None, 0.0, ParamRole::Global),
            buffer: self.buffer(format!("{prefix}.bn"), cout),
            stride,
        }
    }
}

fn build_layout<R: Rng>(spec: &SearchSpaceSpec, b: &mut Builder<'_, R>) -> Layout {
    let c = spec.init_channels;
    let k_nodes = spec.intermediate_nodes();
    let topo = spec.topology();
    let stem_c = spec.stem_multiplier * c;
    let stem = b.conv_bn("stem", spec.input_channels, stem_c, 3, 1);
    let (mut c_pp, mut c_p, mut c_cur) = (stem_c, stem_c, c);
    let mut reduction_prev = false;
    let mut cells = Vec::with_capacity(spec.num_cells);
    for cell in 0..spec.num_cells {
        let reduction = spec.is_reduction(cell);
        if reduction {
            c_cur *= 2;
        }
        let pre = [
            b.conv_bn(&format!("cell{cell}.pre0"), c_p, c_cur, 1, 1),
            b.conv_bn(&format!("cell{cell}.pre1"), c_pp, c_cur, 1, if reduction_prev { 2 } else { 1 }),
        ];
        let mut edges = Vec::with_capacity(topo.num_edges());
        for (e, &(_, pred)) in topo.edges().iter().enumerate() {
            let stride = if reduction && pred < 2 { 2 } else { 1 };
            let mut ops = Vec::with_capacity(spec.ops.len());
            for (o, &kind) in spec.ops.iter().enumerate() {
                let op_spec = OpSpec::new(kind, c_cur, stride);
                let p0 = b.params.len();
                for ps in op_spec.param_shapes() {
                    let fill = if ps.name.ends_with("gamma") { 1.0 } else { 0.0 };
                    b.param(
                        format!("cell{cell}.edge{e}.{}.{}", kind.name(), ps.name),
                        &ps.shape,
                        ps.fan_in,
                        fill,
                        ParamRole::Op {
                            cell,
                            edge: e,
                            op: o,
                            maskable: ps.maskable,
                        },
                    );
                }
                let b0 = b.buffers.len();
                for i in 0..op_spec.num_bn() {
                    b.buffer(format!("cell{cell}.edge{e}.{}.bn{}", kind.name(), i + 1), c_cur);
                }
                ops.push(OpLayout {
                    spec: op_spec,
                    params: p0..b.params.len(),
                    buffers: b0..b.buffers.len(),
                });
            }
            edges.push(ops);
        }
        let kind = spec.kind_index(spec.cell_kind(cell)).expect("kind present");
        cells.push(CellLayout {
            kind,
            channels: c_cur,
            pre,
            edges,
        });
        c_pp = c_p;
        c_p = k_nodes * c_cur;
        reduction_prev = reduction;
    }
    // fan-in doubled so the head draw has std 1/sqrt(F) rather than the He scale
    let head_w = b.param("head.weight".into(), &[spec.num_classes, c_p], Some(2 * c_p), 0.0, ParamRole::Global);
    let head_b = b.param("head.bias".into(), &[spec.num_classes], None, 0.0, ParamRole::Global);
    Layout {
        stem,
        cells,
        head_w,
        head_b,
    }
}

impl Supernet {
    /// Builds a supernet with seeded initialisation: architecture logits are
    /// `U[0, 1) · 1e-3`, convolution and linear weights are He-normal, batch-norm
    /// affine terms start at `γ = 1, β = 0`.
    pub fn build(spec: SearchSpaceSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut wrng = seed::rng(seed, tags::WEIGHT_INIT);
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: Some(&mut wrng),
        };
        let layout = build_layout(&spec, &mut b);
        let weights = Weights {
            params: b.params,
            buffers: b.buffers,
        };
        let mut arng = seed::rng(seed, tags::ARCH_INIT);
        let e = spec.topology().num_edges();
        let n = spec.num_candidate_ops();
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        for _ in spec.kinds() {
            let a: Vec<f64> = (0..e * n).map(|_| ARCH_INIT_SCALE * arng.gen::<f64>()).collect();
            let bt: Vec<f64> = (0..e).map(|_| ARCH_INIT_SCALE * arng.gen::<f64>()).collect();
            alpha.push(Tensor::new(vec![e, n], a)?);
            beta.push(Tensor::new(vec![e], bt)?);
        }
        Ok(Self {
            spec,
            arch: ArchParams { alpha, beta },
            weights,
            layout,
        })
    }

    /// Reassembles a supernet from stored parts, checking every name and shape.
    pub fn from_parts(spec: SearchSpaceSpec, arch: ArchParams, weights: Weights) -> Result<Self> {
        spec.validate()?;
        let mut b: Builder<'_, rand_chacha::ChaCha8Rng> = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: None,
        };
        let layout = build_layout(&spec, &mut b);
        if b.params.len() != weights.params.len() || b.buffers.len() != weights.buffers.len() {
            return Err(Error::Spec("stored weights do not match the search space".into()));
        }
        for (want, got) in b.params.iter().zip(&weights.params) {
            if want.name != got.name || want.value.shape() != got.value.shape() || want.role != got.role {
                return Err(Error::Spec(format!("stored parameter `{}` does not match `{}`", got.name, want.name)));
            }
        }
        for (want, got) in b.buffers.iter().zip(&weights.buffers) {
            if want.name != got.name || want.mean.len() != got.mean.len() || want.var.len() != got.var.len() {
                return Err(Error::Spec(format!("stored buffer `{}` does not match", got.name)));
            }
        }
        let e = spec.topology().num_edges();
        let n = spec.num_candidate_ops();
        let kinds = spec.kinds().len();
        if arch.alpha.len() != kinds
            || arch.beta.len() != kinds
            || arch.alpha.iter().any(|a| a.shape() != [e, n])
            || arch.beta.iter().any(|b| b.shape() != [e])
        {
            return Err(Error::Spec("stored architecture parameters do not match the search space".into()));
        }
        Ok(Self {
            spec,
            arch,
            weights,
            layout,
        })
    }

    pub fn spec(&self) -> &SearchSpaceSpec {
        &self.spec
    }

    pub fn kinds(&self) -> Vec<CellKind> {
        self.spec.kinds()
    }

    /// Replaces every weight with a fresh seeded draw (architecture logits untouched).
    pub fn reinit_weights(&mut self, seed: u64) {
        let fresh = Supernet::build(self.spec.clone(), seed).expect("spec already validated");
        self.weights = fresh.weights;
    }

    pub fn reset_running_stats(&mut self) {
        self.weights.buffers.iter_mut().for_each(BnBuffer::reset);
    }

    /// Indices of parameters belonging to cell op `(cell, edge, op)`.
    pub fn op_params(&self, cell: usize, edge: usize, op: usize) -> Range<usize> {
        self.layout.cells[cell].edges[edge][op].params.clone()
    }

    /// Architecture-kind index used by `cell`.
    pub fn cell_kind_index(&self, cell: usize) -> usize {
        self.layout.cells[cell].kind
    }

    pub fn total_scalars(&self) -> usize {
        self.weights.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalars in the stem, input preprocessing and classifier head.
    pub fn global_scalars(&self) -> usize {
        self.weights.params.iter().filter(|p| p.role == ParamRole::Global).map(|p| p.value.len()).sum()
    }
}
