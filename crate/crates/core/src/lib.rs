//! Collaborative-filtering toolkit that learns user-entity affinity
//! embeddings from playback-duration logs.
//!
//! Play durations are binarized into positive/negative affinity labels at
//! per-type thresholds, expanded into confidence-weighted pairwise ranking
//! triples by uniform entity sampling, and fit with a low-rank factorization
//! trained by stochastic gradient updates (AdaGrad-scaled by default,
//! optionally Hogwild-parallel). Affinity predictions are cosine similarities
//! between user and entity factors, evaluated with Spearman correlation and
//! ROC AUC at configurable duration thresholds.
//!
//! The numeric kernels are generic over the scalar type via [`scalar::Real`];
//! `f32` is the shipping factor precision and matches the on-disk model
//! format, while `f64` backs the metric pipeline and test oracles.

pub mod eval;
pub mod ingest;
pub mod labeling;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod sampling;
pub mod scalar;
pub mod synthgen;
pub mod trainer;
pub mod vocab;

pub use scalar::Real;

/// Scalar type used for factor storage; matches the on-disk model format.
pub type Factor = f32;

/// The embedding model at the shipping precision.
pub type Model = model::EmbeddingModel<Factor>;
