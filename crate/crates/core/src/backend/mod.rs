//! Token-step providers.
//!
//! A [`Backend`] produces, for every position, the raw next-token logits and
//! the hidden activations at each instrumented layer. Three providers ship:
//!
//! * [`SyntheticBackend`], a seeded linear-Gaussian toy model with a planted
//!   ground-truth manifold and a temperature-coupled divergent regime,
//! * [`ReplayBackend`], which serves `HLXT` trace files captured elsewhere,
//! * [`ExternalBackend`], which talks newline-delimited JSON to a child
//!   process.

mod external;
mod replay;
mod synthetic;
mod thermo;

use std::collections::BTreeMap;

use crate::error::Result;

pub use external::{ChildTransport, ExternalBackend, Transport};
pub use replay::{read_trace, ReplayBackend, ReplayWriter, TRACE_MAGIC, TRACE_VERSION};
pub use synthetic::{SyntheticBackend, SyntheticSpec};
pub use thermo::{estimate_effective_temperature, softmax_entropy_at};

/// Hidden activations keyed by layer id.
pub type HiddenStates = BTreeMap<u32, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub hidden_states: HiddenStates,
    /// End of sequence. Terminal marker; its logits are not scored.
    pub is_end: bool,
}

impl StepOutput {
    pub fn end() -> Self {
        Self {
            logits: Vec::new(),
            hidden_states: HiddenStates::new(),
            is_end: true,
        }
    }
}

pub trait Backend: Send {
    /// Vocabulary size; external providers report it after the first step.
    fn vocab_size(&self) -> usize;

    fn layer_ids(&self) -> Vec<u32>;

    /// Resets the stream and returns the output for the first position.
    fn start(&mut self, prompt: &str) -> Result<StepOutput>;

    /// Feeds back the sampled token and returns the next position.
    fn step(&mut self, token: u32, temperature: f64) -> Result<StepOutput>;

    fn token_text(&self, token: u32) -> String {
        token.to_string()
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn layer_ids(&self) -> Vec<u32> {
        (**self).layer_ids()
    }

    fn start(&mut self, prompt: &str) -> Result<StepOutput> {
        (**self).start(prompt)
    }

    fn step(&mut self, token: u32, temperature: f64) -> Result<StepOutput> {
        (**self).step(token, temperature)
    }

    fn token_text(&self, token: u32) -> String {
        (**self).token_text(token)
    }
}
