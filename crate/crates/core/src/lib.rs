//! Task-oriented broadcast semantic communication.
//!
//! One transmitter encodes an image into a single power-normalized symbol
//! vector that is broadcast to several receivers, each over its own channel
//! and each solving its own task. The crate covers channel simulation, the
//! network building blocks, the variational multi-task objective, training
//! with checkpoints, and SNR sweeps with plots.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod error;
pub mod graph;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod chansim;
pub mod net;
pub mod objective;
pub mod data;
pub mod optim;
pub mod checkpoint;
pub mod trainer;
pub mod eval;
pub mod config;
pub mod experiment;
pub mod criteria;
pub mod selftest;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParameterStore32 = params::ParameterStore<f32>;
pub type ParameterStore64 = params::ParameterStore<f64>;
pub type Batch32 = data::Batch<f32>;
pub type Batch64 = data::Batch<f64>;
pub type Adam32 = optim::Adam<f32>;
pub type Adam64 = optim::Adam<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Evaluator32<'a> = eval::Evaluator<'a, f32>;
pub type Evaluator64<'a> = eval::Evaluator<'a, f64>;
