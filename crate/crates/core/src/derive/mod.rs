//! Discrete architectures: extraction from masks, hand-designed and random
//! baselines, and the architecture analyses.

mod discrete;
mod dot;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{OpKind, Tensor};
use crate::searchspace::{mixing_weights, BinaryMasks, CellKind, CellTopology, SearchSpaceSpec, Supernet};
use crate::seed::{self, tags};

pub use discrete::DiscreteNet;
pub use dot::{export_dot, write_dot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    HierarchicalMasks,
    HeuristicTop2,
    Random,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::HierarchicalMasks => "hierarchical_masks",
            Provenance::HeuristicTop2 => "heuristic_top2",
            Provenance::Random => "random",
        }
    }
}

/// Architecture-encoding level used by the hand-designed derivation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    /// Edges ranked by their strongest operation weight; `β` ignored.
    Single,
    /// Edges ranked by the softmax of `β` over the node's incoming edges.
    Multi,
}

/// One surviving edge of a derived cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchEdge {
    pub node: usize,
    /// `0` is `c_{k-1}`, `1` is `c_{k-2}`, `2 + m` is intermediate node `m`.
    pub pred: usize,
    /// Indices into the candidate operation list, ascending.
    pub ops: Vec<usize>,
    /// Post-softmax edge weight renormalised over the node's surviving edges.
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellArch {
    pub kind: CellKind,
    /// Sorted by `(node, pred)`.
    pub edges: Vec<ArchEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedArch {
    pub ops: Vec<OpKind>,
    pub intermediate_nodes: usize,
    /// One entry per cell kind present, in [`SearchSpaceSpec::kinds`] order.
    pub cells: Vec<CellArch>,
    pub provenance: Provenance,
}

impl DerivedArch {
    pub fn topology(&self) -> CellTopology {
        CellTopology::new(self.intermediate_nodes)
    }

    pub fn op_names(&self, edge: &ArchEdge) -> Vec<&'static str> {
        edge.ops.iter().map(|&o| self.ops[o].name()).collect()
    }

    /// Binary masks that select exactly this architecture (all weights kept).
    pub fn to_masks(&self, net: &Supernet) -> BinaryMasks {
        let mut m = BinaryMasks::ones(net);
        let topo = self.topology();
        let n = self.ops.len();
        for (k, cell) in self.cells.iter().enumerate() {
            m.alpha[k].data_mut().fill(0.0);
            m.beta[k].data_mut().fill(0.0);
            for e in &cell.edges {
                let idx = topo.edge_index(e.node, e.pred).expect("edge within topology");
                m.beta[k].data_mut()[idx] = 1.0;
                for &o in &e.ops {
                    m.alpha[k].data_mut()[idx * n + o] = 1.0;
                }
            }
        }
        m
    }
}

/// Softmax of `beta` over each node's incoming edges, renormalised over the
/// edges flagged in `alive`.
fn edge_importance(topo: &CellTopology, beta: &[f64], alive: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; beta.len()];
    for node in 0..topo.intermediate_nodes() {
        let r = topo.node_edges(node);
        let mask: Vec<f64> = r.clone().map(|e| if alive[e] { 1.0 } else { 0.0 }).collect();
        let w = mixing_weights(&beta[r.clone()], Some(&mask));
        for (j, e) in r.enumerate() {
            out[e] = w[j];
        }
    }
    out
}

fn build_cells(
    net_spec: &SearchSpaceSpec,
    betas: &[Tensor],
    mut edge_ops: impl FnMut(usize, usize) -> Vec<usize>,
) -> Vec<CellArch> {
    let topo = net_spec.topology();
    net_spec
        .kinds()
        .into_iter()
        .enumerate()
        .map(|(k, kind)| {
            let ops: Vec<Vec<usize>> = (0..topo.num_edges()).map(|e| edge_ops(k, e)).collect();
            let alive: Vec<bool> = ops.iter().map(|o| !o.is_empty()).collect();
            let imp = edge_importance(&topo, betas[k].data(), &alive);
            let edges = topo
                .edges()
                .iter()
                .enumerate()
                .filter(|(e, _)| alive[*e])
                .map(|(e, &(node, pred))| ArchEdge { node, pred, ops: ops[e].clone(), importance: imp[e] })
                .collect();
            CellArch { kind, edges }
        })
        .collect()
}

/// Edge `e` survives iff its edge mask is set and at least one of its
/// operations survives; its operations are the surviving operation masks.
pub fn from_masks(net: &Supernet, masks: &BinaryMasks) -> DerivedArch {
    let spec = net.spec();
    let n = spec.num_candidate_ops();
    let cells = build_cells(spec, &net.arch.beta, |k, e| {
        if masks.beta[k].data()[e] == 0.0 {
            return Vec::new();
        }
        (0..n).filter(|&o| masks.alpha[k].data()[e * n + o] != 0.0).collect()
    });
    DerivedArch {
        ops: spec.ops.clone(),
        intermediate_nodes: spec.intermediate_nodes(),
        cells,
        provenance: Provenance::HierarchicalMasks,
    }
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Indices of the `k` largest scores, ties broken towards lower indices,
/// returned in ascending index order.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k.min(order.len())].to_vec();
    keep.sort_unstable();
    keep
}

/// Keeps the strongest operation on every edge and the two strongest
/// incoming edges of every node.
pub fn derive_heuristic(net: &Supernet, level: Level) -> DerivedArch {
    let spec = net.spec();
    let topo = spec.topology();
    let n = spec.num_candidate_ops();
    let mut chosen: Vec<Vec<Vec<usize>>> = Vec::new();
    for k in 0..spec.kinds().len() {
        let alpha = net.arch.alpha[k].data();
        let beta = net.arch.beta[k].data();
        let mut per_edge = vec![Vec::new(); topo.num_edges()];
        for node in 0..topo.intermediate_nodes() {
            let r = topo.node_edges(node);
            let scores: Vec<f64> = match level {
                Level::Multi => mixing_weights(&beta[r.clone()], None),
                Level::Single => r
                    .clone()
                    .map(|e| mixing_weights(&alpha[e * n..(e + 1) * n], None).into_iter().fold(f64::MIN, f64::max))
                    .collect(),
            };
            for j in top_k(&scores, 2) {
                let e = r.start + j;
                per_edge[e] = vec![argmax(&alpha[e * n..(e + 1) * n])];
            }
        }
        chosen.push(per_edge);
    }
    let betas: Vec<Tensor> = match level {
        Level::Multi => net.arch.beta.clone(),
        Level::Single => net.arch.beta.iter().map(|b| Tensor::zeros(b.shape())).collect(),
    };
    DerivedArch {
        ops: spec.ops.clone(),
        intermediate_nodes: spec.intermediate_nodes(),
        cells: build_cells(spec, &betas, |k, e| chosen[k][e].clone()),
        provenance: Provenance::HeuristicTop2,
    }
}

/// Two distinct incoming edges per node and one operation per chosen edge,
/// drawn uniformly; edge importance is uniform.
pub fn sample_random_arch(spec: &SearchSpaceSpec, seed: u64) -> DerivedArch {
    let topo = spec.topology();
    let mut rng = seed::rng(seed, tags::RANDOM_ARCH);
    let n = spec.num_candidate_ops();
    let mut chosen: Vec<Vec<Vec<usize>>> = Vec::new();
    for _ in spec.kinds() {
        let mut per_edge = vec![Vec::new(); topo.num_edges()];
        for node in 0..topo.intermediate_nodes() {
            let r = topo.node_edges(node);
            let mut picks = sample(&mut rng, r.len(), 2).into_vec();
            picks.sort_unstable();
            for j in picks {
                per_edge[r.start + j] = vec![rng.gen_range(0..n)];
            }
        }
        chosen.push(per_edge);
    }
    let zeros: Vec<Tensor> = spec.kinds().iter().map(|_| Tensor::zeros(&[topo.num_edges()])).collect();
    DerivedArch {
        ops: spec.ops.clone(),
        intermediate_nodes: spec.intermediate_nodes(),
        cells: build_cells(spec, &zeros, |k, e| chosen[k][e].clone()),
        provenance: Provenance::Random,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeImportance {
    pub node: usize,
    /// `(pred, importance)` for every incoming edge.
    pub edges: Vec<(usize, f64)>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub kind: CellKind,
    pub nodes: Vec<NodeImportance>,
}

/// Softmax of `β` over each node's incoming edges, per cell kind.
pub fn edge_importance_report(net: &Supernet) -> Vec<ImportanceReport> {
    let topo = net.spec().topology();
    net.kinds()
        .into_iter()
        .enumerate()
        .map(|(k, kind)| {
            let beta = net.arch.beta[k].data();
            let nodes = (0..topo.intermediate_nodes())
                .map(|node| {
                    let r = topo.node_edges(node);
                    let w = mixing_weights(&beta[r.clone()], None);
                    let mean = w.iter().sum::<f64>() / w.len() as f64;
                    NodeImportance { node, edges: w.into_iter().enumerate().collect(), mean }
                })
                .collect();
            ImportanceReport { kind, nodes }
        })
        .collect()
}

/// Per-edge importance mean and sample standard deviation across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceStat {
    pub kind: CellKind,
    pub node: usize,
    pub pred: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate_importance(runs: &[Vec<ImportanceReport>]) -> Vec<ImportanceStat> {
    let mut acc: BTreeMap<(CellKind, usize, usize), Vec<f64>> = BTreeMap::new();
    for run in runs {
        for rep in run {
            for n in &rep.nodes {
                for &(pred, w) in &n.edges {
                    acc.entry((rep.kind, n.node, pred)).or_default().push(w);
                }
            }
        }
    }
    acc.into_iter()
        .map(|((kind, node, pred), v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            ImportanceStat { kind, node, pred, mean, std }
        })
        .collect()
}

/// Incoming-edge counts per node and the histogram of edges by number of operations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpHistogram {
    pub kind: CellKind,
    pub edges_per_node: Vec<usize>,
    /// `num_ops → num_edges`, for `num_ops` in `1..=N`.
    pub ops_per_edge: BTreeMap<usize, usize>,
}

pub fn op_histogram(arch: &DerivedArch) -> Vec<OpHistogram> {
    arch.cells
        .iter()
        .map(|cell| {
            let mut edges_per_node = vec![0; arch.intermediate_nodes];
            let mut ops_per_edge: BTreeMap<usize, usize> = (1..=arch.ops.len()).map(|k| (k, 0)).collect();
            for e in &cell.edges {
                edges_per_node[e.node] += 1;
                *ops_per_edge.entry(e.ops.len()).or_default() += 1;
            }
            OpHistogram { kind: cell.kind, edges_per_node, ops_per_edge }
        })
        .collect()
}
