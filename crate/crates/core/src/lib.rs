//! Cloze-style idiom prediction: a small transformer encoder, five scoring
//! heads, training, evaluation, group decoding and attribution.
//!
//! The numeric core is generic over [`Scalar`] (`f64` or `f32`); the aliases
//! below fix it to `f64`, which the CLI uses throughout.

pub mod assignment;
pub mod attribution;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape<'a> = tensor::Tape<'a, f64>;
pub type HiddenStates = encoder::HiddenStates<f64>;
pub type CandidateDistribution = heads::CandidateDistribution<f64>;
pub type DualEmbeddingTable = heads::DualEmbeddingTable<f64>;
pub type ClozeModel = model::ClozeModel<f64>;
pub type Trainer = training::Trainer<f64>;
pub type ClozeModelF32 = model::ClozeModel<f32>;
