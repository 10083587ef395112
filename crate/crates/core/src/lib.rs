//! Nested-prefix ("matryoshka") sentence embeddings trained with layer-wise
//! self-distillation and progressive information chaining, on a small
//! transformer encoder with its own reverse-mode differentiation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod manifest;
pub mod objective;
pub mod optim;
pub mod params;
pub mod pic;
pub mod report;
pub mod sia;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
