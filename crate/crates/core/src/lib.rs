//! Core library for meta-learned, domain-generalizable re-identification on
//! tabular feature vectors.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff graph whose
//!   backward pass is itself recorded, giving exact gradients of gradients —
//!   the machinery that makes the bilevel training objective differentiable.
//! - [`model`]: a small MLP encoder with a statistics-normalization layer
//!   whose batch statistics can be captured per domain and re-sampled.
//! - [`losses`]: batch-hard triplet loss and identity cross-entropy.
//! - [`data`]: a synthetic multi-domain identity dataset (generator, CSV
//!   round-trip, episodic P×K batch sampler).
//! - [`optim`]: Adam with decoupled weight decay, gradient clipping, and the
//!   warmup learning-rate schedule.
//! - [`meta`]: the bilevel training engine — episode splitting, the
//!   differentiable inner step, domain-statistics feature mixing, and the
//!   outer update.
//! - [`eval`]: retrieval evaluation (mean average precision and CMC ranks).
//!
//! Numerical work is generic over [`tensor::Scalar`] (`f32` for training,
//! `f64` for verification); verification oracles run at `f64` only.

pub mod data;
pub mod eval;
pub mod losses;
pub mod meta;
pub mod model;
pub mod optim;
pub mod tensor;
