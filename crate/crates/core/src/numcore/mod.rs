//! Dense double-precision tensors, a reverse-mode tape, and the candidate
//! operation kernels used by the search space.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many};
pub use kernels::{Conv2dGeom, PoolKind, BN_EPS};
pub use ops::{op_forward, OpKind, OpOutput, OpSpec, ParamShape};
pub use tape::{BnStats, Gradients, Tape, Var};
pub use tensor::Tensor;
