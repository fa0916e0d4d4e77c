//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod conv;
mod graph;
mod ops;

pub use conv::{Conv2dOptions, Padding};
pub use graph::{Gradients, Graph, Var};
pub use ops::{BatchNormConfig, RunningStats};
