//! Dense `f64` matrices, two-layer perceptrons with hand-written backward
//! passes, and a central-difference gradient checker.
//!
//! Everything here is deterministic: reductions run in a fixed order, so the
//! same inputs always produce bit-identical outputs.

pub mod gradcheck;
pub mod matrix;
pub mod mlp;

pub use gradcheck::{flatten_grads, flatten_values, grad_check, unflatten_values, GradCheck};
pub use matrix::{
    cosine_rows, cosine_rows_backward, dot, l2_normalize_rows, matmul, matmul_nt, matmul_tn, norm,
    sigmoid, softmax_rows, softplus, Matrix, Normalized,
};
pub use mlp::{FinalActivation, Linear, Mlp2, Mlp2Cache, Parameter};

/// Norm below which a row is treated as zero by [`l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;
/// Floor on the denominator of [`cosine_rows`].
pub const COSINE_EPS: f64 = 1e-12;
