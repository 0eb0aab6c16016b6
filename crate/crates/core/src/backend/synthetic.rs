//! Linear-Gaussian toy language model with a planted truth manifold.
//!
//! In the truthful regime the base state follows a mean-reverting AR(1)
//! process around `truth_mean` with stationary covariance `sigma^2 I`. With
//! probability `drift_rate * T` per step the process enters a divergent
//! regime and walks `divergence_step * sigma` per step along a fixed
//! direction pointing partly away from the truth mean. While divergent the
//! model keeps going as long as it is fed its own top token; being fed a
//! different token lets it recover with probability `recovery_prob`, and the
//! regime also ends spontaneously with probability `regime_hazard` per step.
//!
//! Logits are a linear read-out of the base state. The emission matrix is
//! constructed so that `truth_mean^T E` boosts a single "anchor" token, so the
//! on-manifold distribution is confidently peaked. Each layer exposes an
//! elementwise rescaling of the base deviation from the mean.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Backend, HiddenStates, StepOutput};
use crate::error::{check_finite, Error, Result};
use crate::kernels::dot;
use crate::manifold::{ActivationSample, BuildMetadata, Manifold, ManifoldBuilder};
use crate::steering::argmax;

const TRUTH_MEAN_NORM: f64 = 12.0;
const ANCHOR_BOOST: f64 = 12.0;
const EMISSION_NOISE: f64 = 0.8;

const SYLLABLES: [&str; 20] = [
    "ba", "ko", "mi", "ru", "te", "sa", "lo", "ni", "vu", "de", "pa", "zo", "fi", "gu", "he", "ja", "we", "yo", "ci", "xu",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Seeds the stochastic dynamics (not the planted geometry).
    pub seed: u64,
    pub vocab_size: usize,
    pub dim: usize,
    pub layer_ids: Vec<u32>,
    pub truth_mean: Vec<f64>,
    pub truth_cov_scale: f64,
    pub drift_rate: f64,
    pub divergence_step: f64,
    /// `dim x vocab_size`, row-major.
    pub emission_matrix: Vec<f64>,
    /// Per-layer elementwise scale applied to the deviation from the mean.
    pub layer_scales: BTreeMap<u32, Vec<f64>>,
    /// AR(1) coefficient of the truthful regime.
    pub mean_reversion: f64,
    pub recovery_prob: f64,
    pub regime_hazard: f64,
    /// Weight of the component pointing away from the truth mean in the
    /// divergence direction.
    pub outward_bias: f64,
    /// Highest supported temperature; `drift_rate * max_temperature <= 1`.
    pub max_temperature: f64,
}

impl SyntheticSpec {
    /// Randomly planted geometry from `world_seed`. Dynamics defaults produce
    /// occasional divergence that grows with temperature.
    pub fn planted(world_seed: u64, dim: usize, vocab_size: usize, layer_ids: &[u32]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed);
        rng.set_stream(1);
        let mut mu: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dot(&mu, &mu).sqrt();
        mu.iter_mut().for_each(|m| *m *= TRUTH_MEAN_NORM / norm);

        let w_scale = EMISSION_NOISE / (dim as f64).sqrt();
        let mut e: Vec<f64> = (0..dim * vocab_size)
            .map(|_| w_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        // E += mu (b - mu^T W) / |mu|^2 so that mu^T E = b exactly
        let mu2 = dot(&mu, &mu);
        for v in 0..vocab_size {
            let col: f64 = (0..dim).map(|i| mu[i] * e[i * vocab_size + v]).sum();
            let b = if v == 0 { ANCHOR_BOOST } else { 0.0 };
            for i in 0..dim {
                e[i * vocab_size + v] += mu[i] * (b - col) / mu2;
            }
        }
        let layer_scales = layer_ids
            .iter()
            .map(|&id| (id, (0..dim).map(|_| rng.random_range(0.5..2.0)).collect()))
            .collect();

        Self {
            seed: world_seed,
            vocab_size,
            dim,
            layer_ids: layer_ids.to_vec(),
            truth_mean: mu,
            truth_cov_scale: 1.0,
            drift_rate: 0.003,
            divergence_step: 10.0,
            emission_matrix: e,
            layer_scales,
            mean_reversion: 0.8,
            recovery_prob: 0.5,
            regime_hazard: 0.2,
            outward_bias: 1.0,
            max_temperature: 5.0,
        }
    }

    /// d = 8, V = 64, layers 4/12/20, occasional temperature-driven divergence.
    pub fn divergence_prone(world_seed: u64) -> Self {
        Self::planted(world_seed, 8, 64, &[4, 12, 20])
    }

    /// Same geometry as [`SyntheticSpec::divergence_prone`] with drift disabled.
    pub fn on_manifold(world_seed: u64) -> Self {
        Self {
            drift_rate: 0.0,
            ..Self::divergence_prone(world_seed)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_drift(mut self, drift_rate: f64) -> Self {
        self.drift_rate = drift_rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size < 2 || self.dim < 2 {
            return bad(format!(
                "synthetic backend needs V >= 2 and d >= 2, got V={} d={}",
                self.vocab_size, self.dim
            ));
        }
        if self.vocab_size > u32::MAX as usize {
            return bad("vocabulary too large".into());
        }
        if self.layer_ids.is_empty() {
            return bad("no layers".into());
        }
        if self.truth_mean.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: self.truth_mean.len(),
            });
        }
        if self.emission_matrix.len() != self.dim * self.vocab_size {
            return Err(Error::DimensionMismatch {
                expected: self.dim * self.vocab_size,
                actual: self.emission_matrix.len(),
            });
        }
        check_finite(&self.truth_mean)?;
        check_finite(&self.emission_matrix)?;
        for id in &self.layer_ids {
            match self.layer_scales.get(id) {
                Some(s) if s.len() == self.dim && s.iter().all(|v| *v > 0.0 && v.is_finite()) => {}
                _ => return bad(format!("layer {id}: missing or invalid scale vector")),
            }
        }
        if !(self.truth_cov_scale > 0.0 && self.truth_cov_scale.is_finite()) {
            return bad(format!("truth_cov_scale must be > 0, got {}", self.truth_cov_scale));
        }
        if !(self.divergence_step > 0.0 && self.divergence_step.is_finite()) {
            return bad(format!("divergence_step must be > 0, got {}", self.divergence_step));
        }
        if !(self.max_temperature > 0.0) || !(self.drift_rate >= 0.0) {
            return bad("drift_rate must be >= 0 and max_temperature > 0".into());
        }
        if self.drift_rate * self.max_temperature > 1.0 {
            return bad(format!(
                "drift_rate * max_temperature = {} exceeds 1",
                self.drift_rate * self.max_temperature
            ));
        }
        if !(0.0..1.0).contains(&self.mean_reversion) {
            return bad(format!("mean_reversion must be in [0, 1), got {}", self.mean_reversion));
        }
        for (name, p) in [("recovery_prob", self.recovery_prob), ("regime_hazard", self.regime_hazard)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be a probability, got {p}"));
            }
        }
        if !(self.outward_bias >= 0.0 && self.outward_bias.is_finite()) {
            return bad(format!("outward_bias must be >= 0, got {}", self.outward_bias));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    spec: SyntheticSpec,
    /// Emission stored token-major (`V x d`) for contiguous dot products.
    emission_t: Vec<f64>,
    rng: ChaCha8Rng,
    state: Vec<f64>,
    divergent: bool,
    direction: Vec<f64>,
    last_argmax: usize,
    noise: Vec<f64>,
    dir_draw: Vec<f64>,
}

impl SyntheticBackend {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let (d, v) = (spec.dim, spec.vocab_size);
        let mut emission_t = vec![0.0; d * v];
        for i in 0..d {
            for t in 0..v {
                emission_t[t * d + i] = spec.emission_matrix[i * v + t];
            }
        }
        Ok(Self {
            emission_t,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            state: spec.truth_mean.clone(),
            divergent: false,
            direction: vec![0.0; d],
            last_argmax: 0,
            noise: vec![0.0; d],
            dir_draw: vec![0.0; d],
            spec,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Whether the last transition left the process in the divergent regime.
    pub fn is_divergent(&self) -> bool {
        self.divergent
    }

    pub fn base_state(&self) -> &[f64] {
        &self.state
    }

    /// Truthful-regime activations for manifold building: `n` steps of the
    /// undisturbed process, one [`HiddenStates`] per step.
    pub fn truthful_samples(spec: &SyntheticSpec, n: usize) -> Result<Vec<HiddenStates>> {
        let mut b = SyntheticBackend::new(spec.clone().with_drift(0.0))?;
        b.reset(b.spec.seed);
        // burn in so the first samples are drawn from the stationary law
        for _ in 0..64 {
            b.transition(0, 1.0);
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            b.transition(0, 1.0);
            out.push(b.hidden());
        }
        Ok(out)
    }

    /// Builds and calibrates a manifold from `n` truthful-regime steps.
    pub fn build_manifold(spec: &SyntheticSpec, n: usize, lambda: f64, holdout_fraction: f64) -> Result<Manifold> {
        let mut builder = ManifoldBuilder::new(lambda, holdout_fraction)?;
        for hidden in Self::truthful_samples(spec, n)? {
            for (id, h) in hidden {
                builder.push(&ActivationSample::new(id, h))?;
            }
        }
        builder.build(BuildMetadata {
            corpus: format!("synthetic:{}x{}:world", spec.dim, spec.vocab_size),
            ..BuildMetadata::default()
        })
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state.copy_from_slice(&self.spec.truth_mean);
        self.divergent = false;
        self.direction.iter_mut().for_each(|x| *x = 0.0);
        self.last_argmax = 0;
    }

    /// One step of the regime-switching dynamics. Draws a fixed number of
    /// variates regardless of branch.
    fn transition(&mut self, token: u32, temperature: f64) {
        let s = &self.spec;
        let sigma = s.truth_cov_scale;
        let u_recover: f64 = self.rng.random();
        let u_hazard: f64 = self.rng.random();
        let u_onset: f64 = self.rng.random();
        for x in self.noise.iter_mut().chain(self.dir_draw.iter_mut()) {
            *x = self.rng.sample(StandardNormal);
        }

        if self.divergent
            && ((token as usize != self.last_argmax && u_recover < s.recovery_prob) || u_hazard < s.regime_hazard)
        {
            self.divergent = false;
        } else if self.divergent {
            let step = s.divergence_step * sigma;
            for (x, u) in self.state.iter_mut().zip(&self.direction) {
                *x += step * u;
            }
        }
        if !self.divergent {
            if u_onset < s.drift_rate * temperature {
                self.divergent = true;
                self.set_direction();
                let step = self.spec.divergence_step * sigma;
                for (x, u) in self.state.iter_mut().zip(&self.direction) {
                    *x += step * u;
                }
            } else {
                let rho = s.mean_reversion;
                let k = sigma * (1.0 - rho * rho).sqrt();
                for ((x, m), g) in self.state.iter_mut().zip(&s.truth_mean).zip(&self.noise) {
                    *x = m + rho * (*x - m) + k * g;
                }
            }
        }
    }

    /// Unit vector `-bias * mu_hat + g_perp / |g_perp|`, normalized.
    fn set_direction(&mut self) {
        let mu = &self.spec.truth_mean;
        let mu_norm = dot(mu, mu).sqrt();
        let proj = dot(&self.dir_draw, mu) / mu_norm;
        let mut perp: Vec<f64> = self
            .dir_draw
            .iter()
            .zip(mu)
            .map(|(g, m)| g - proj * m / mu_norm)
            .collect();
        let pn = dot(&perp, &perp).sqrt().max(f64::MIN_POSITIVE);
        perp.iter_mut().for_each(|p| *p /= pn);
        let bias = self.spec.outward_bias;
        for ((u, p), m) in self.direction.iter_mut().zip(&perp).zip(mu) {
            *u = p - bias * m / mu_norm;
        }
        let un = dot(&self.direction, &self.direction).sqrt();
        self.direction.iter_mut().for_each(|u| *u /= un);
    }

    fn hidden(&self) -> HiddenStates {
        let mu = &self.spec.truth_mean;
        self.spec
            .layer_scales
            .iter()
            .map(|(&id, scale)| {
                let h = self
                    .state
                    .iter()
                    .zip(mu)
                    .zip(scale)
                    .map(|((x, m), s)| m + s * (x - m))
                    .collect();
                (id, h)
            })
            .collect()
    }

    fn emit(&mut self) -> StepOutput {
        let d = self.spec.dim;
        let logits: Vec<f64> = self
            .emission_t
            .chunks_exact(d)
            .map(|row| dot(row, &self.state))
            .collect();
        self.last_argmax = argmax(&logits);
        StepOutput {
            logits,
            hidden_states: self.hidden(),
            is_end: false,
        }
    }
}

impl Backend for SyntheticBackend {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    fn layer_ids(&self) -> Vec<u32> {
        self.spec.layer_scales.keys().copied().collect()
    }

    fn start(&mut self, prompt: &str) -> Result<StepOutput> {
        self.reset(self.spec.seed ^ fnv1a(prompt.as_bytes()));
        Ok(self.emit())
    }

    fn step(&mut self, token: u32, temperature: f64) -> Result<StepOutput> {
        if token as usize >= self.spec.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token {token} outside vocabulary of {}",
                self.spec.vocab_size
            )));
        }
        if !(temperature > 0.0 && temperature <= self.spec.max_temperature) {
            return Err(Error::InvalidArgument(format!(
                "temperature {temperature} outside (0, {}]",
                self.spec.max_temperature
            )));
        }
        self.transition(token, temperature);
        Ok(self.emit())
    }

    fn token_text(&self, token: u32) -> String {
        let n = SYLLABLES.len() as u32;
        let (a, b) = (token % n, (token / n) % n);
        let mut s = format!("{}{}", SYLLABLES[a as usize], SYLLABLES[b as usize]);
        if token >= n * n {
            s.push_str(&(token / (n * n)).to_string());
        }
        s
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
