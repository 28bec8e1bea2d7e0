//! Cell DAG search space and the multi-level encoded supernet.

mod forward;
mod loss;
mod spec;
pub(crate) mod supernet;

pub use forward::{
    collect_batch_stats, mixed_op_forward, mixing_weights, node_forward, BatchStat, BinaryMasks, Binding, ForwardPass,
    MaskBinding, Mode,
};
pub use loss::{argmax_rows, GradRequest, GradSet, LossEval};
pub use spec::{default_reduction_cells, predecessor_label, CellKind, CellTopology, SearchSpaceSpec};
pub use supernet::{ArchParams, BnBuffer, Param, ParamRole, Supernet, Weights, ARCH_INIT_SCALE};

/// Total number of scalars in a set of tensors.
pub fn count_scalars<'a>(tensors: impl IntoIterator<Item = &'a crate::numcore::Tensor>) -> usize {
    tensors.into_iter().map(|t| t.len()).sum()
}
