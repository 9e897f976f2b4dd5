//! Dense tensors, tape-based reverse-mode differentiation, a finite-difference
//! gradient checker and the checkpoint container.

mod batchnorm;
pub mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use batchnorm::{BnMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use gradcheck::{gradcheck, relative_error, GradcheckConfig, GradcheckReport};
pub use graph::{Backward, Graph, Var};
pub use tensor::{ParamStore, Tensor};
