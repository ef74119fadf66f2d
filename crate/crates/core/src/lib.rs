//! Desk-scale face-privacy pipeline: a toy diffusion score network is fine-tuned so
//! that its DDIM reconstructions impersonate a target identity while carrying an
//! expression edit. Identity and expression gradients are reconciled per layer by
//! projecting away conflicts against EMA estimates of the full-data gradients.
//!
//! The numeric core ([`graph`], [`diffusion`], [`objectives`], [`surgery`],
//! [`landmarks`]) is generic over [`Scalar`]; the experiment pipeline runs in `f64`.

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod faces;
pub mod graph;
pub mod landmarks;
pub mod nn;
pub mod objectives;
pub mod prep;
pub mod scalar;
pub mod spectrum;
pub mod surgery;
pub mod tensor;
pub mod theorems;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Norms at or below this are treated as zero when normalizing.
pub const DEGENERATE_EPS: f64 = 1e-12;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Graph32 = graph::Graph<f32>;
