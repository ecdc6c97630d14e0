//! Multivariate time-series forecasting over a learned slim graph.
//!
//! Instead of learning a full N x N adjacency, the engine samples M shared
//! significant neighbors, scores each node against just those M candidates
//! with sparse (entmax-normalized) multi-head attention, and runs a
//! graph-diffusion GRU encoder-decoder over the resulting N x M adjacency.
//! Memory and compute grow as O(N * M) instead of O(N^2).
//!
//! Layout:
//! - [`tensor`], [`tape`], [`param`]: dense f64 tensors and reverse-mode
//!   differentiation over the model's fixed op set.
//! - [`entmax`]: the sparse simplex projection and its exact backward rule.
//! - [`graph`]: candidate pools, significant-neighbor sampling, and the
//!   sparse attention producing the slim adjacency.
//! - [`diffusion`]: the fast graph convolution and the recurrent cell.
//! - [`model`], [`train`], [`optim`], [`checkpoint`]: the forecaster,
//!   training loop, Adam, and persistence.
//! - [`data`], [`synth`], [`metrics`]: ingestion, windowing, the synthetic
//!   planted-diffusion generator, and masked metrics.
//! - [`memstats`], [`scaling`]: allocation accounting and scaling probes.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod entmax;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod memstats;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod rng;
pub mod scaling;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
