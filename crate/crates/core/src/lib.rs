//! Channel-aware probing of frozen multi-channel vision transformer
//! features: a small autodiff core, a from-scratch ViT encoder with joint
//! and independent channel encoding, pooling heads with joint and decoupled
//! channel pooling, linear probing, a synthetic redundancy-controlled data
//! generator, diversity and FLOP analysis, and a binary feature store.
//!
//! Library code is generic over the scalar type; the aliases below fix the
//! compute precision to `f64` and the storage precision to `f32`.

pub mod analysis;
pub mod cli;
pub mod encoder;
pub mod numerics;
pub mod pooling;
pub mod probe;
pub mod scalar;
pub mod store;
pub mod synthdata;

pub use scalar::Scalar;

/// Compute-precision tensor.
pub type Tensor = numerics::Tensor<f64>;
/// Storage-precision tensor.
pub type StoredTensor = numerics::Tensor<f32>;
pub type EncoderWeights = encoder::EncoderWeights<f64>;
pub type FeatureMap = encoder::FeatureMap<f64>;
pub type StoredFeatureMap = encoder::FeatureMap<f32>;
pub type Pooler = pooling::Pooler<f64>;
