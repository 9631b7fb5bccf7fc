//! Pose-guided feature learning with knowledge distillation for occluded
//! person re-identification.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluator;
pub mod feb;
pub mod heatmaps;
pub mod model;
pub mod params;
pub mod reid_losses;
pub mod responses;
pub mod rng;
pub mod sab;
pub mod scalar;
pub mod synth_data;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision working types used for training and inference.
pub type Tensor32 = Tensor<f32>;
pub type Model32 = model::Model<f32>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Batch32 = trainer::LabeledBatch<f32>;

/// Double-precision types used by the gradient checks.
pub type Tensor64 = Tensor<f64>;
pub type Model64 = model::Model<f64>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Batch64 = trainer::LabeledBatch<f64>;
