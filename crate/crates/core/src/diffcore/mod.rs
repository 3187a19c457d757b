//! Dense tensors and reverse-mode differentiation over a fixed primitive set.

mod check;
mod element;
mod expr;
mod graph;
mod params;
mod tensor;

pub use check::{
    finite_diff_check, finite_diff_check_all, relative_error, value, value_and_grad, Objective,
};
pub use element::{DType, Element};
pub use expr::{eval, grad, Expr};
pub use graph::{CustomOp, Gradients, Graph, Op, Var};
#[cfg(test)]
pub(crate) use graph::sigmoid;
pub use params::{BoundParams, ParamSet};
pub use tensor::Tensor;

/// Variance epsilon used by every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
