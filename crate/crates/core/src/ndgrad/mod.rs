//! Dense tensors, named parameters and a reverse-mode differentiation tape.

mod gradcheck;
mod graph;
pub mod kernels;
pub mod ops;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Mode, Var, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use params::{he_fan_out, truncated_normal, Param, ParamKind, ParamStore};
pub use tensor::Tensor;
