//! Video salient object detection with spatiotemporal self-distillation.
//!
//! A per-frame saliency network (backbone + ASPP + saliency-guidance
//! embedding units) trained in two stages: single-frame supervision, then
//! frame-pair finetuning where the final phase distills the earlier phases
//! (spatially) and the adjacent frame's phases (temporally), optionally
//! through a mutual-attention infer-frame encoder that is removed at test
//! time. Includes the standard max-F / MAE evaluation suite and a toy-scale
//! synthetic data generator.
//!
//! All numeric code is generic over the scalar type ([`scalar::Scalar`]);
//! training and inference run in `f32`, verification suites in `f64`.

pub mod attention;
pub mod embedding;
pub mod error;
pub mod features;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod params;
pub mod persistence;
pub mod scalar;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Default working precision of the training/inference pipeline.
pub type F = f32;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Params32 = params::ParameterStore<f32>;
pub type Params64 = params::ParameterStore<f64>;
