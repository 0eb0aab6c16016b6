use serde::{Deserialize, Serialize};

use super::{decide, Sampler, SamplerConfig, SteeringConfig};
use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::manifold::Manifold;
use crate::telemetry::{TelemetryRecord, TelemetrySink};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMode {
    /// Score every token and steer when below threshold.
    #[default]
    Enabled,
    /// Score and record every token, never modify logits.
    ObserveOnly,
    /// Skip scoring entirely; no telemetry records are produced.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub max_tokens: usize,
    pub mode: SteeringMode,
    pub sampler: SamplerConfig,
    pub stream_id: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_tokens: 64,
            mode: SteeringMode::Enabled,
            sampler: SamplerConfig::default(),
            stream_id: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    MaxTokens,
    EndOfSequence,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: String,
    pub temperature: f64,
    pub tokens: Vec<u32>,
    pub text: String,
    pub records: Vec<TelemetryRecord>,
    pub finish: FinishReason,
    pub error: Option<String>,
    pub telemetry_degraded: bool,
}

impl GenerationTrace {
    pub fn steered_count(&self) -> usize {
        self.records.iter().filter(|r| r.steered).count()
    }

    pub fn mean_uts(&self) -> Option<f64> {
        if self.records.is_empty() {
            None
        } else {
            Some(self.records.iter().map(|r| r.uts).sum::<f64>() / self.records.len() as f64)
        }
    }
}

/// Autoregressive loop: step the backend, decide, sample, record.
///
/// Configuration and handshake problems are returned as errors. Failures
/// after the first token end the trace early with `finish = Error`; the
/// tokens and telemetry gathered so far are kept. A failing sink only marks
/// the trace as degraded.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    backend: &mut dyn Backend,
    manifold: &Manifold,
    prompt: &str,
    temperature: f64,
    cfg: &SteeringConfig,
    opts: &GenerateOptions,
    sampler_seed: u64,
    mut sink: Option<&mut dyn TelemetrySink>,
) -> Result<GenerationTrace> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if opts.mode != SteeringMode::Disabled {
        cfg.validate()?;
        cfg.check_manifold(manifold)?;
    }
    let mut sampler = Sampler::new(sampler_seed, opts.sampler);
    let mut trace = GenerationTrace {
        prompt: prompt.to_owned(),
        temperature,
        tokens: Vec::with_capacity(opts.max_tokens),
        text: String::new(),
        records: Vec::new(),
        finish: FinishReason::MaxTokens,
        error: None,
        telemetry_degraded: false,
    };
    let no_delta = Default::default();

    let mut out = backend.start(prompt)?;
    for step in 0..opts.max_tokens {
        if out.is_end {
            trace.finish = FinishReason::EndOfSequence;
            break;
        }
        let token = match opts.mode {
            SteeringMode::Disabled => sampler.sample(&out.logits, &no_delta, temperature) as u32,
            mode => {
                let decision = match decide(&out.logits, &out.hidden_states, manifold, temperature, cfg) {
                    Ok(d) => d,
                    Err(e) => {
                        fail(&mut trace, e);
                        break;
                    }
                };
                let delta = if mode == SteeringMode::Enabled {
                    &decision.modified_logits_delta
                } else {
                    &no_delta
                };
                let token = sampler.sample(&out.logits, delta, temperature) as u32;
                let mut record =
                    TelemetryRecord::from_decision(step as u64, token, &decision, temperature, opts.stream_id);
                if mode == SteeringMode::ObserveOnly {
                    record.steered = false;
                    record.penalty = 0.0;
                }
                if let Some(s) = sink.as_deref_mut() {
                    if !trace.telemetry_degraded {
                        if let Err(e) = s.emit(&record) {
                            log::warn!("telemetry sink failed at step {step}: {e}; continuing without it");
                            trace.telemetry_degraded = true;
                        }
                    }
                }
                trace.records.push(record);
                token
            }
        };
        trace.tokens.push(token);
        if step + 1 == opts.max_tokens {
            break;
        }
        out = match backend.step(token, temperature) {
            Ok(o) => o,
            Err(e) => {
                fail(&mut trace, e);
                break;
            }
        };
    }
    if let Some(s) = sink {
        if !trace.telemetry_degraded {
            if let Err(e) = s.flush() {
                log::warn!("telemetry flush failed: {e}");
                trace.telemetry_degraded = true;
            }
        }
    }
    trace.text = trace
        .tokens
        .iter()
        .map(|&t| backend.token_text(t))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(trace)
}

fn fail(trace: &mut GenerationTrace, e: Error) {
    log::warn!("generation stopped after {} tokens: {e}", trace.tokens.len());
    trace.finish = FinishReason::Error;
    trace.error = Some(e.to_string());
}
