//! Uncertainty-guided generation steering.
//!
//! Each decoded token is scored with a Unified Truth Score that fuses the
//! entropy of the next-token distribution with the Mahalanobis distance of
//! the model's hidden state from a pre-computed "truthfulness manifold". When
//! the score falls below a temperature-adaptive threshold, the top logit is
//! penalized before sampling.
//!
//! Module map:
//!
//! * [`manifold`]: streaming moments, regularized Cholesky factor, distance
//!   queries and the `HLXM` file format.
//! * [`scoring`]: entropy, confidences, handover weight and the fused score.
//! * [`steering`]: thresholds, penalties, per-token decisions and the
//!   generation loop.
//! * [`backend`]: token-step providers (synthetic, replay, external process).
//! * [`telemetry`]: per-token records, JSONL sinks and summaries.
//! * [`metrics`]: diversity and coherence metrics over generated text.
//! * [`synthesis`]: multi-temperature sweeps and concept clustering.
//! * [`config`]: layered configuration with provenance.

// `!(x > 0.0)` lets NaN take the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod config;
pub mod error;
mod kernels;
pub mod manifold;
pub mod metrics;
pub mod scoring;
pub mod steering;
pub mod synthesis;
pub mod telemetry;
mod wire;

pub use error::{Error, Result};
