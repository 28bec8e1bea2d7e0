use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::OpKind;

/// Normal cells keep resolution; reduction cells halve it and double channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduction => "reduction",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceSpec {
    /// Two input nodes, the intermediate nodes, and one output node.
    pub nodes_per_cell: usize,
    pub num_cells: usize,
    pub init_channels: usize,
    /// Candidate operations; `N = ops.len()`.
    pub ops: Vec<OpKind>,
    pub reduction_cells: Vec<usize>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub stem_multiplier: usize,
}

impl Default for SearchSpaceSpec {
    fn default() -> Self {
        Self {
            nodes_per_cell: 7,
            num_cells: 3,
            init_channels: 4,
            ops: OpKind::ALL.to_vec(),
            reduction_cells: default_reduction_cells(3),
            num_classes: 10,
            input_channels: 3,
            stem_multiplier: 3,
        }
    }
}

/// Cells at `⌊n/3⌋` and `⌊2n/3⌋`.
pub fn default_reduction_cells(num_cells: usize) -> Vec<usize> {
    let mut v = vec![num_cells / 3, 2 * num_cells / 3];
    v.dedup();
    v.retain(|&c| c < num_cells);
    v
}

impl SearchSpaceSpec {
    /// A single normal cell with one intermediate node: the smallest valid space.
    pub fn micro(ops: Vec<OpKind>, num_classes: usize) -> Self {
        Self {
            nodes_per_cell: 4,
            num_cells: 1,
            init_channels: 2,
            ops,
            reduction_cells: Vec::new(),
            num_classes,
            input_channels: 3,
            stem_multiplier: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_cell < 4 {
            return Err(Error::Spec(format!(
                "nodes_per_cell must be at least 4 (two inputs, one intermediate, one output), got {}",
                self.nodes_per_cell
            )));
        }
        if self.num_cells == 0 || self.init_channels == 0 || self.input_channels == 0 || self.stem_multiplier == 0 {
            return Err(Error::Spec("num_cells, channels and stem multiplier must be positive".into()));
        }
        if self.ops.is_empty() {
            return Err(Error::Spec("at least one candidate operation is required".into()));
        }
        let mut sorted = self.ops.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.ops.len() {
            return Err(Error::Spec("candidate operations must be distinct".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec("num_classes must be at least 2".into()));
        }
        if let Some(&c) = self.reduction_cells.iter().find(|&&c| c >= self.num_cells) {
            return Err(Error::Spec(format!("reduction cell {c} outside 0..{}", self.num_cells)));
        }
        Ok(())
    }

    pub fn num_candidate_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn intermediate_nodes(&self) -> usize {
        self.nodes_per_cell - 3
    }

    pub fn topology(&self) -> CellTopology {
        CellTopology::new(self.intermediate_nodes())
    }

    pub fn is_reduction(&self, cell: usize) -> bool {
        self.reduction_cells.contains(&cell)
    }

    pub fn cell_kind(&self, cell: usize) -> CellKind {
        if self.is_reduction(cell) {
            CellKind::Reduction
        } else {
            CellKind::Normal
        }
    }

    /// Cell kinds present in the network, normal first. Architecture
    /// parameters and their masks are indexed by position in this list.
    pub fn kinds(&self) -> Vec<CellKind> {
        let mut kinds: Vec<CellKind> = (0..self.num_cells).map(|c| self.cell_kind(c)).collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    pub fn kind_index(&self, kind: CellKind) -> Option<usize> {
        self.kinds().iter().position(|&k| k == kind)
    }

    /// Smallest spatial side length the reduction schedule supports.
    pub fn min_input_side(&self) -> usize {
        1 << self.reduction_cells.len()
    }
}

/// Edge enumeration of the cell template.
///
/// Predecessor `0` is the output of cell `k−1`, predecessor `1` that of cell
/// `k−2`, and predecessor `2 + m` is intermediate node `m`. Intermediate node
/// `i` receives one edge from each of its `i + 2` predecessors; edges are
/// numbered node by node, predecessor by predecessor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTopology {
    intermediate: usize,
    edges: Vec<(usize, usize)>,
}

impl CellTopology {
    pub fn new(intermediate: usize) -> Self {
        let edges = (0..intermediate).flat_map(|i| (0..i + 2).map(move |j| (i, j))).collect();
        Self { intermediate, edges }
    }

    pub fn intermediate_nodes(&self) -> usize {
        self.intermediate
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// `(node, predecessor)` of every edge.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_edges(&self, node: usize) -> Range<usize> {
        let start = (0..node).map(|i| i + 2).sum();
        start..start + node + 2
    }

    pub fn edge_index(&self, node: usize, pred: usize) -> Option<usize> {
        (pred < node + 2).then(|| self.node_edges(node).start + pred)
    }
}

pub fn predecessor_label(pred: usize) -> String {
    match pred {
        0 => "c_{k-1}".to_string(),
        1 => "c_{k-2}".to_string(),
        m => (m - 2).to_string(),
    }
}
