//! Dense matrices and the reverse-mode graph built on them.

mod finite_diff;
mod graph;
mod matrix;

pub use finite_diff::{central_difference, relative_error};
pub use graph::{AttentionLayout, Fault, Graph, Var, CKA_EPS, KL_CLAMP, NORM_EPS};
pub(crate) use graph::softmax_into;
pub use matrix::Matrix;
