//! Masked bounding box reconstruction (MBBR): self-supervised pretraining of
//! a transformer scene encoder, few-shot predicate classification on top of
//! the learned representations, and recall-based evaluation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for callers that do not care.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fewshot;
pub mod geometry;
pub mod mbbr;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type EncoderWeights64 = encoder::EncoderWeights<f64>;
pub type EncoderWeights32 = encoder::EncoderWeights<f32>;
pub type MbbrModel64 = mbbr::MbbrModel<f64>;
pub type MbbrModel32 = mbbr::MbbrModel<f32>;
pub type ClassifierWeights64 = fewshot::ClassifierWeights<f64>;
pub type ClassifierWeights32 = fewshot::ClassifierWeights<f32>;
