//! Retrieval-driven low-rank adapter fusion.
//!
//! A [`Library`] pairs each training domain's embedding centroid with the
//! low-rank adapter trained on that domain. At test time a query embedding
//! selects its nearest adapters, weights them by a temperature softmax over
//! inverse distances and merges them into a single adapter
//! ([`fusion::fuse`]). The [`bench`] module provides a synthetic, CPU-sized
//! stand-in for a full adaptation benchmark; [`metrics`] and [`stream`]
//! cover evaluation and deployment policies.
//!
//! Matrix and adapter math is generic over [`Scalar`] (`f32`, `f64`).
//! Library payloads are stored as `f32`; merging and evaluation run in `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod fusion;
pub mod library;
pub mod metrics;
pub mod scalar;
pub mod stream;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
pub use fusion::{DistanceMetric, FusedAdapter, FusionConfig, FusionPlan};
pub use library::{DomainRecord, Embedding, Library};
pub use scalar::Scalar;

/// Double-precision matrix, the working type for merge and evaluation math.
pub type Matrix = tensor::Matrix<f64>;
/// Single-precision matrix, the storage type of library payloads.
pub type Matrix32 = tensor::Matrix<f32>;
pub type LoraPair = tensor::LoraPair<f64>;
pub type LoraPair32 = tensor::LoraPair<f32>;
pub type AdapterSet = tensor::AdapterSet<f64>;
pub type AdapterSet32 = tensor::AdapterSet<f32>;
/// Merged adapter as produced by [`fusion::fuse`].
pub type Fused = fusion::FusedAdapter<f64>;
