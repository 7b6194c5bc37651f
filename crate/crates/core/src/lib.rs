//! Relation classification head over dependency graphs.
//!
//! A frozen encoder supplies one contextual vector per word plus a sentence
//! vector. The head runs a graph convolution over the dependency tree, max-pools
//! the sentence, subject and object, and classifies the pair.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the width for callers that do not care.

pub mod corpus;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use data::{Example, LabelRegistry, ModelConfig, Span};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type EncodedSentence64 = data::EncodedSentence<f64>;
pub type EncodedSentence32 = data::EncodedSentence<f32>;
pub type PreparedExample64 = trainer::PreparedExample<f64>;
pub type PreparedExample32 = trainer::PreparedExample<f32>;
