//! Unified Truth Score.
//!
//! `UTS = beta(T) * S_E + (1 - beta(T)) * S_D` where
//!
//! * `S_E = 1 - H / ln V`, with `H` the Shannon entropy (nats) of the
//!   unit-temperature softmax of the raw logits,
//! * `S_D = exp(-D / d_ref)` aggregated over the steering layers,
//! * `beta(T) = 1 / (1 + exp(kappa (T - T_c)))`.
//!
//! Entropy is always taken before temperature scaling; the sampler applies
//! `z / T` separately.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::HiddenStates;
use crate::error::{check_finite, Error, Result};
use crate::kernels;
use crate::manifold::Manifold;

pub const DEFAULT_KAPPA: f64 = 2.0;
pub const DEFAULT_T_C: f64 = 1.5;

/// Sigmoid handover between entropy and manifold confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandoverParams {
    pub kappa: f64,
    pub t_c: f64,
}

impl Default for HandoverParams {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
            t_c: DEFAULT_T_C,
        }
    }
}

impl HandoverParams {
    pub fn new(kappa: f64, t_c: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) || !t_c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "handover needs kappa > 0 and finite T_c, got kappa={kappa} T_c={t_c}"
            )));
        }
        Ok(Self { kappa, t_c })
    }
}

/// How per-layer manifold confidences collapse into one `S_D`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdAggregation {
    #[default]
    Mean,
    Min,
    Max,
}

impl SdAggregation {
    pub fn apply(self, values: impl IntoIterator<Item = f64>) -> Option<f64> {
        let mut n = 0usize;
        let mut acc = match self {
            SdAggregation::Mean => 0.0,
            SdAggregation::Min => f64::INFINITY,
            SdAggregation::Max => f64::NEG_INFINITY,
        };
        for v in values {
            n += 1;
            acc = match self {
                SdAggregation::Mean => acc + v,
                SdAggregation::Min => acc.min(v),
                SdAggregation::Max => acc.max(v),
            };
        }
        match (n, self) {
            (0, _) => None,
            (_, SdAggregation::Mean) => Some(acc / n as f64),
            _ => Some(acc),
        }
    }
}

impl FromStr for SdAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "min" => Ok(Self::Min),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown S_D aggregation {other:?}"))),
        }
    }
}

impl fmt::Display for SdAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Min => "min",
            Self::Max => "max",
        })
    }
}

/// Every component that went into one token's UTS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub entropy_nats: f64,
    pub s_e: f64,
    pub per_layer_distance: BTreeMap<u32, f64>,
    pub per_layer_s_d: BTreeMap<u32, f64>,
    pub s_d: f64,
    pub beta_t: f64,
    pub uts: f64,
}

/// Shannon entropy in nats of `softmax(logits)` at unit temperature.
pub fn entropy(logits: &[f64]) -> Result<f64> {
    entropy_and_argmax(logits).map(|(h, _)| h)
}

/// Entropy plus the index of the first maximal logit, in one pass over the
/// exponentials.
pub(crate) fn entropy_and_argmax(logits: &[f64]) -> Result<(f64, usize)> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "entropy needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    check_finite(logits)?;
    Ok(entropy_core(logits, 1.0))
}

/// Entropy of `softmax(logits * inv_t)` and the first argmax. With the max
/// shifted to zero, `Z = 1 + rest` and `H = ln(1 + rest) + sum_i e_i |s_i| / Z`,
/// a sum of non-negative terms, so peaked distributions keep full relative
/// precision.
pub(crate) fn entropy_core(logits: &[f64], inv_t: f64) -> (f64, usize) {
    let mut argmax = 0;
    let mut max = logits[0];
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > max {
            max = l;
            argmax = i;
        }
    }
    let (mut rest, mut weighted) = (0.0, 0.0);
    for part in [&logits[..argmax], &logits[argmax + 1..]] {
        let (r, w) = kernels::exp_moments(part, max, inv_t);
        rest += r;
        weighted += w;
    }
    (rest.ln_1p() + weighted / (1.0 + rest), argmax)
}

pub fn semantic_confidence(entropy_nats: f64, vocab_size: usize) -> Result<f64> {
    if vocab_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size must be at least 2, got {vocab_size}"
        )));
    }
    if !(entropy_nats >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "entropy must be non-negative, got {entropy_nats}"
        )));
    }
    Ok((1.0 - entropy_nats / (vocab_size as f64).ln()).clamp(0.0, 1.0))
}

pub fn manifold_confidence(distance: f64, d_ref: f64) -> Result<f64> {
    if !(d_ref > 0.0) {
        return Err(Error::InvalidArgument(format!("d_ref must be positive, got {d_ref}")));
    }
    if !(distance >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distance must be non-negative, got {distance}"
        )));
    }
    Ok((-distance / d_ref).exp())
}

/// `beta(T)`; strictly decreasing in `T`, 0.5 at `T_c`.
pub fn handover_weight(temperature: f64, params: &HandoverParams) -> f64 {
    debug_assert!(temperature > 0.0);
    1.0 / (1.0 + (params.kappa * (temperature - params.t_c)).exp())
}

#[inline]
pub fn unified_truth_score(beta: f64, s_e: f64, s_d: f64) -> f64 {
    beta * s_e + (1.0 - beta) * s_d
}

/// Score one token. `layers` selects which manifold layers contribute to `S_D`.
pub fn score(
    logits: &[f64],
    hidden: &HiddenStates,
    manifold: &Manifold,
    layers: &[u32],
    temperature: f64,
    handover: &HandoverParams,
    aggregation: SdAggregation,
) -> Result<ScoreBreakdown> {
    score_with_argmax(logits, hidden, manifold, layers, temperature, handover, aggregation)
        .map(|(s, _)| s)
}

pub(crate) fn score_with_argmax(
    logits: &[f64],
    hidden: &HiddenStates,
    manifold: &Manifold,
    layers: &[u32],
    temperature: f64,
    handover: &HandoverParams,
    aggregation: SdAggregation,
) -> Result<(ScoreBreakdown, usize)> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no steering layers selected".into()));
    }
    let (entropy_nats, argmax) = entropy_and_argmax(logits)?;
    let s_e = semantic_confidence(entropy_nats, logits.len())?;

    let mut per_layer_distance = BTreeMap::new();
    let mut per_layer_s_d = BTreeMap::new();
    for &id in layers {
        let lm = manifold.layer(id).ok_or(Error::MissingLayer(id))?;
        let h = hidden.get(&id).ok_or(Error::MissingLayer(id))?;
        let d = lm.mahalanobis(h)?;
        per_layer_distance.insert(id, d);
        per_layer_s_d.insert(id, manifold_confidence(d, lm.d_ref())?);
    }
    let s_d = aggregation
        .apply(per_layer_s_d.values().copied())
        .expect("at least one layer");
    let beta_t = handover_weight(temperature, handover);
    let breakdown = ScoreBreakdown {
        entropy_nats,
        s_e,
        per_layer_distance,
        per_layer_s_d,
        s_d,
        beta_t,
        uts: unified_truth_score(beta_t, s_e, s_d),
    };
    Ok((breakdown, argmax))
}
