//! Minimal shaped-tensor engine with reverse-mode differentiation.
//!
//! A [`Graph`] is an eager tape: every operation computes its value
//! immediately and records what it needs for the backward sweep. Tensors are
//! row-major over explicit extents; the model only ever needs rank 1..3.
//! Training runs at `f32`; gradient verification runs the same generic code at
//! `f64` where finite differences are meaningful.

mod check;
mod graph;
mod tensor;

pub use check::finite_diff_check;
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};
