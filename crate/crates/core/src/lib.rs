//! Regularized adaptive graph learning for large-scale traffic forecasting.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense `f64` matrices and reverse-mode
//!   differentiation with a finite-difference checker.
//! - [`regularization`]: stochastic shared node embeddings.
//! - [`graph_conv`]: the linear-time cosine graph operator, its quadratic
//!   oracle, diffusion convolution and the ablation adjacencies.
//! - [`embedding`], [`encoder`], [`model`]: the forecaster itself.
//! - [`data`], [`synth`]: series files, windowing, normalization, geographic
//!   adjacency and a seeded synthetic generator.
//! - [`trainer`], [`checkpoint`], [`metrics`]: optimization and evaluation.
//! - [`bench`], [`config`]: scaling benchmark, weight inspection and the flat
//!   configuration format used by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod graph_conv;
pub mod metrics;
pub mod model;
pub mod regularization;
pub mod synth;
pub mod trainer;
pub mod tape;
pub mod tensor;

pub use error::{RaglError, Result};
pub use tensor::Tensor;
