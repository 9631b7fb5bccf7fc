//! Minimal reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

mod basic;
mod conv;
mod loss;
mod norm;
mod pool;
mod tape;

pub mod gradcheck;

pub(crate) use basic::softmax_in_place;

pub use conv::{conv_multiply_adds, ConvGeometry};
pub use norm::BatchStats;
pub use tape::{Detached, Gradients, Tape, Var};
