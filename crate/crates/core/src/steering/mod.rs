//! Per-token steering decisions.
//!
//! A token is steered when its UTS is below `tau(T) = tau0 / (1 + gamma *
//! max(0, T - T_base))`. Steering lowers only the argmax logit; the amount
//! grows with the shortfall `tau - UTS` and is capped by `penalty_scale`.

mod generate;
mod sampler;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::HiddenStates;
use crate::error::{check_finite, Error, Result};
use crate::manifold::Manifold;
use crate::scoring::{self, HandoverParams, ScoreBreakdown, SdAggregation};

pub use generate::{generate, FinishReason, GenerateOptions, GenerationTrace, SteeringMode};
pub use sampler::{Sampler, SamplerConfig};

pub const DEFAULT_TAU0: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_T_BASE: f64 = 0.7;
pub const DEFAULT_PENALTY_SCALE: f64 = 4.0;
pub const DEFAULT_STEERING_LAYERS: [u32; 3] = [4, 12, 20];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyShape {
    /// `scale * sigmoid(x)`: already half the scale at the threshold.
    PaperLiteral,
    /// `scale * (2 sigmoid(x) - 1)`: zero at the threshold.
    #[default]
    BoundaryContinuous,
}

impl FromStr for PenaltyShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "paper_literal" | "literal" => Ok(Self::PaperLiteral),
            "boundary_continuous" | "continuous" => Ok(Self::BoundaryContinuous),
            other => Err(Error::Config(format!("unknown penalty shape {other:?}"))),
        }
    }
}

impl fmt::Display for PenaltyShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PaperLiteral => "paper_literal",
            Self::BoundaryContinuous => "boundary_continuous",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub tau0: f64,
    pub gamma: f64,
    pub t_base: f64,
    pub penalty_scale: f64,
    pub handover: HandoverParams,
    pub sd_aggregation: SdAggregation,
    pub penalty_shape: PenaltyShape,
    pub steering_layers: Vec<u32>,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            tau0: DEFAULT_TAU0,
            gamma: DEFAULT_GAMMA,
            t_base: DEFAULT_T_BASE,
            penalty_scale: DEFAULT_PENALTY_SCALE,
            handover: HandoverParams::default(),
            sd_aggregation: SdAggregation::default(),
            penalty_shape: PenaltyShape::default(),
            steering_layers: DEFAULT_STEERING_LAYERS.to_vec(),
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(what));
        if !(self.tau0 > 0.0 && self.tau0 <= 1.0) {
            return bad(format!("tau0 must be in (0, 1], got {}", self.tau0));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.t_base > 0.0 && self.t_base.is_finite()) {
            return bad(format!("T_base must be > 0, got {}", self.t_base));
        }
        if !(self.penalty_scale >= 0.0 && self.penalty_scale.is_finite()) {
            return bad(format!("penalty scale must be >= 0, got {}", self.penalty_scale));
        }
        HandoverParams::new(self.handover.kappa, self.handover.t_c)?;
        if self.steering_layers.is_empty() {
            return bad("steering layer list is empty".into());
        }
        Ok(())
    }

    pub fn with_layers(mut self, layers: impl Into<Vec<u32>>) -> Self {
        self.steering_layers = layers.into();
        self
    }

    /// Every steering layer must exist in the manifold.
    pub fn check_manifold(&self, manifold: &Manifold) -> Result<()> {
        for &id in &self.steering_layers {
            if manifold.layer(id).is_none() {
                return Err(Error::MissingLayer(id));
            }
        }
        Ok(())
    }
}

/// `tau0 / (1 + gamma * max(0, T - T_base))`.
pub fn adaptive_threshold(temperature: f64, cfg: &SteeringConfig) -> f64 {
    debug_assert!(temperature > 0.0);
    cfg.tau0 / (1.0 + cfg.gamma * (temperature - cfg.t_base).max(0.0))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Penalty for a token whose UTS sits `tau - uts` below threshold; zero when
/// the threshold is met.
pub fn penalty(uts: f64, tau: f64, cfg: &SteeringConfig) -> f64 {
    let x = tau - uts;
    if !(x > 0.0) {
        return 0.0;
    }
    let shaped = match cfg.penalty_shape {
        PenaltyShape::PaperLiteral => sigmoid(x),
        // 2 sigmoid(x) - 1 == tanh(x / 2), which keeps precision near zero
        PenaltyShape::BoundaryContinuous => (x / 2.0).tanh(),
    };
    cfg.penalty_scale * shaped
}

/// Index of the first maximal logit.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Applies the steering penalty to a copy of `logits`. Returns the (possibly
/// unchanged) logits and the penalty subtracted from the argmax entry.
pub fn steer_logits(
    logits: &[f64],
    uts: f64,
    tau: f64,
    cfg: &SteeringConfig,
) -> Result<(Vec<f64>, f64)> {
    check_finite(logits)?;
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    let mut out = logits.to_vec();
    let p = penalty(uts, tau, cfg);
    if p > 0.0 {
        out[argmax(logits)] -= p;
    }
    Ok((out, p))
}

/// Everything decided about one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDecision {
    pub scores: ScoreBreakdown,
    pub tau_t: f64,
    pub steered: bool,
    pub penalty_applied: f64,
    pub argmax_index: usize,
    /// Additive logit changes; empty unless steered, and then only the argmax.
    pub modified_logits_delta: BTreeMap<usize, f64>,
}

impl TokenDecision {
    /// Materializes the post-steering logits.
    pub fn apply(&self, logits: &[f64]) -> Vec<f64> {
        let mut out = logits.to_vec();
        for (&i, &d) in &self.modified_logits_delta {
            out[i] += d;
        }
        out
    }
}

/// Score a token and decide whether to steer it. On the confident path no
/// logits are copied; the decision carries only a sparse delta.
pub fn decide(
    logits: &[f64],
    hidden: &HiddenStates,
    manifold: &Manifold,
    temperature: f64,
    cfg: &SteeringConfig,
) -> Result<TokenDecision> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (scores, argmax_index) = scoring::score_with_argmax(
        logits,
        hidden,
        manifold,
        &cfg.steering_layers,
        temperature,
        &cfg.handover,
        cfg.sd_aggregation,
    )?;
    let tau_t = adaptive_threshold(temperature, cfg);
    let penalty_applied = penalty(scores.uts, tau_t, cfg);
    let steered = penalty_applied > 0.0;
    let mut modified_logits_delta = BTreeMap::new();
    if steered {
        modified_logits_delta.insert(argmax_index, -penalty_applied);
    }
    Ok(TokenDecision {
        scores,
        tau_t,
        steered,
        penalty_applied,
        argmax_index,
        modified_logits_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn threshold_examples() {
        let cfg = SteeringConfig::default();
        assert_eq!(adaptive_threshold(0.5, &cfg), 0.5);
        assert_eq!(adaptive_threshold(0.7, &cfg), 0.5);
        assert_relative_eq!(adaptive_threshold(2.7, &cfg), 0.25, max_relative = 1e-15);
        let flat = SteeringConfig { gamma: 0.0, ..cfg };
        for t in [0.1, 1.0, 3.0, 10.0] {
            assert_eq!(adaptive_threshold(t, &flat), 0.5);
        }
    }

    #[test]
    fn penalty_examples() {
        let cfg = SteeringConfig::default();
        assert_eq!(penalty(0.9, 0.5, &cfg), 0.0);
        assert_eq!(penalty(0.5, 0.5, &cfg), 0.0);
        assert_relative_eq!(penalty(0.3, 0.5, &cfg), 0.398_67, epsilon = 1e-5);
        let lit = SteeringConfig {
            penalty_shape: PenaltyShape::PaperLiteral,
            ..cfg
        };
        // the literal shape jumps to half scale just below threshold
        assert_relative_eq!(penalty(0.5 - 1e-12, 0.5, &lit), 2.0, max_relative = 1e-9);
        assert_eq!(penalty(0.5, 0.5, &lit), 0.0);
    }

    #[test]
    fn steer_touches_only_argmax() {
        let cfg = SteeringConfig::default();
        let logits = [0.1, 2.0, -1.0, 2.0];
        let (out, p) = steer_logits(&logits, 0.1, 0.5, &cfg).unwrap();
        assert!(p > 0.0);
        assert_eq!(out[1], 2.0 - p);
        for i in [0, 2, 3] {
            assert_eq!(out[i].to_bits(), logits[i].to_bits());
        }
        let (same, p) = steer_logits(&logits, 0.9, 0.5, &cfg).unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(same, logits);
        assert!(steer_logits(&[1.0, f64::NAN], 0.1, 0.5, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SteeringConfig::default().validate().is_ok());
        for bad in [
            SteeringConfig { tau0: 0.0, ..Default::default() },
            SteeringConfig { tau0: 1.5, ..Default::default() },
            SteeringConfig { gamma: -1.0, ..Default::default() },
            SteeringConfig { penalty_scale: -0.1, ..Default::default() },
            SteeringConfig::default().with_layers(vec![]),
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn shape_parsing() {
        assert_eq!("paper-literal".parse::<PenaltyShape>().unwrap(), PenaltyShape::PaperLiteral);
        assert_eq!(
            PenaltyShape::BoundaryContinuous.to_string().parse::<PenaltyShape>().unwrap(),
            PenaltyShape::BoundaryContinuous
        );
        assert!("cubic".parse::<PenaltyShape>().is_err());
    }
}
