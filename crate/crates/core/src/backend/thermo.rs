use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_finite, Error, Result};
use crate::scoring::entropy_core;

const ENTROPY_TOL: f64 = 1e-4;
const MAX_BISECTIONS: usize = 200;

/// Entropy (nats) of `softmax(logits / T)`.
pub fn softmax_entropy_at(logits: &[f64], temperature: f64) -> f64 {
    entropy_core(logits, 1.0 / temperature).0
}

/// Temperature at which the noiseless distribution has the same entropy as
/// the average noisy one: Monte-Carlo mean of `H(softmax((z + eps) / T))`
/// over `trials` draws of `eps ~ N(0, noise_std^2 I)`, then bisection on
/// `log T`.
pub fn estimate_effective_temperature(
    logits: &[f64],
    noise_std: f64,
    temperature: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 trials, got {trials}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std must be >= 0, got {noise_std}")));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 logits".into()));
    }
    check_finite(logits)?;

    let target = if noise_std == 0.0 {
        softmax_entropy_at(logits, temperature)
    } else {
        let normal = Normal::new(0.0, noise_std).expect("validated std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noisy = vec![0.0; logits.len()];
        let mut acc = 0.0;
        for _ in 0..trials {
            for (n, &l) in noisy.iter_mut().zip(logits) {
                *n = l + normal.sample(&mut rng);
            }
            acc += softmax_entropy_at(&noisy, temperature);
        }
        acc / trials as f64
    };

    let (mut lo, mut hi) = ((temperature * 1e-3).ln(), (temperature * 1e3).ln());
    let h_lo = softmax_entropy_at(logits, lo.exp());
    let h_hi = softmax_entropy_at(logits, hi.exp());
    if h_hi - h_lo < ENTROPY_TOL {
        return Err(Error::Saturated(
            "entropy is insensitive to temperature (flat logits)".into(),
        ));
    }
    if target < h_lo - ENTROPY_TOL || target > h_hi + ENTROPY_TOL {
        return Err(Error::Saturated(format!(
            "target entropy {target} outside [{h_lo}, {h_hi}]"
        )));
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if softmax_entropy_at(logits, mid.exp()) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}
