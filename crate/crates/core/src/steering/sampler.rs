use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Decoding options applied after steering. Defaults to a plain categorical
/// draw from `softmax(z / T)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Take the argmax of the (steered) logits.
    pub greedy: bool,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
}

/// Seeded categorical sampler. Every call consumes exactly one uniform
/// variate, whatever the mode, so paired runs stay aligned.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
    cfg: SamplerConfig,
    weights: Vec<f64>,
    order: Vec<usize>,
}

impl Sampler {
    pub fn new(seed: u64, cfg: SamplerConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cfg,
            weights: Vec::new(),
            order: Vec::new(),
        }
    }

    /// Draws from `softmax((logits + delta) / T)` without copying the caller's
    /// logits.
    pub fn sample(&mut self, logits: &[f64], delta: &BTreeMap<usize, f64>, temperature: f64) -> usize {
        let u: f64 = self.rng.random();
        let inv_t = 1.0 / temperature;
        self.weights.clear();
        self.weights.extend(logits.iter().map(|&z| z * inv_t));
        for (&i, &d) in delta {
            self.weights[i] += d * inv_t;
        }
        let w = &mut self.weights;
        let mut best = 0;
        for i in 1..w.len() {
            if w[i] > w[best] {
                best = i;
            }
        }
        if self.cfg.greedy {
            return best;
        }
        let max = w[best];
        let mut total = 0.0;
        for x in w.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }

        if self.cfg.top_k.is_some() || self.cfg.top_p.is_some() {
            total = self.truncate(total);
        }

        let mut target = u * total;
        let mut last = best;
        for (i, &x) in self.weights.iter().enumerate() {
            if x > 0.0 {
                if target < x {
                    return i;
                }
                target -= x;
                last = i;
            }
        }
        last
    }

    /// Zeroes weights outside the top-k / nucleus set; returns the new total.
    fn truncate(&mut self, total: f64) -> f64 {
        let w = &mut self.weights;
        self.order.clear();
        self.order.extend(0..w.len());
        self.order
            .sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
        let mut keep = self.order.len();
        if let Some(k) = self.cfg.top_k {
            keep = keep.min(k.max(1));
        }
        if let Some(p) = self.cfg.top_p {
            let mut acc = 0.0;
            for (rank, &i) in self.order.iter().enumerate().take(keep) {
                acc += w[i];
                if acc >= p * total {
                    keep = rank + 1;
                    break;
                }
            }
        }
        let mut kept = 0.0;
        for (rank, &i) in self.order.iter().enumerate() {
            if rank < keep {
                kept += w[i];
            } else {
                w[i] = 0.0;
            }
        }
        kept
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NONE: BTreeMap<usize, f64> = BTreeMap::new();

    #[test]
    fn deterministic() {
        let logits = [0.1, 0.5, 0.2, 1.0];
        let mut a = Sampler::new(3, SamplerConfig::default());
        let mut b = Sampler::new(3, SamplerConfig::default());
        for _ in 0..200 {
            assert_eq!(a.sample(&logits, &NONE, 1.3), b.sample(&logits, &NONE, 1.3));
        }
    }

    #[test]
    fn frequencies_follow_softmax() {
        let logits = [0.0, 1.0f64.ln() + 1.0, 2.0];
        let mut s = Sampler::new(11, SamplerConfig::default());
        let n = 60_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[s.sample(&logits, &NONE, 1.0)] += 1;
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for i in 0..3 {
            let p = logits[i].exp() / z;
            let f = counts[i] as f64 / n as f64;
            assert!((f - p).abs() < 0.01, "token {i}: {f} vs {p}");
        }
    }

    #[test]
    fn greedy_respects_delta() {
        let mut s = Sampler::new(0, SamplerConfig { greedy: true, ..Default::default() });
        let logits = [1.0, 3.0, 2.5];
        assert_eq!(s.sample(&logits, &NONE, 1.0), 1);
        let delta = BTreeMap::from([(1, -1.0)]);
        assert_eq!(s.sample(&logits, &delta, 1.0), 2);
    }

    #[test]
    fn top_k_and_top_p() {
        let logits = [3.0, 2.9, -5.0, -5.0, -5.0];
        let mut k = Sampler::new(5, SamplerConfig { top_k: Some(2), ..Default::default() });
        let mut p = Sampler::new(5, SamplerConfig { top_p: Some(0.5), ..Default::default() });
        for _ in 0..2000 {
            assert!(k.sample(&logits, &NONE, 5.0) < 2);
            assert_eq!(p.sample(&logits, &NONE, 1.0), 0);
        }
    }
}
