//! Desk-scale transformer arithmetic and FFN fusion.
//!
//! Everything in this crate is pure computation over heap-allocated
//! matrices: block and model forward passes, exact fusion of consecutive
//! feed-forward layers by weight concatenation, block dependency analysis,
//! greedy block-parallel planning, and an analytic tensor-parallel latency
//! model. IO, file formats, and the wall-clock benchmark harness live in
//! the companion `ffnf` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod dependency;
pub mod error;
pub mod fusion;
pub mod latency;
pub mod matrix;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{
    AttentionWeights, Block, BlockSpec, Dtype, FfnWeights, Model, ModelConfig, NormScale,
};
pub use ops::ForwardTrace;

/// Floor used wherever a vector norm guards a division.
pub const NORM_EPS: f64 = 1e-12;
