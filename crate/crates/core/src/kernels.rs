/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `(sum e_i, sum e_i s_i)` with `s_i = (max - l_i) * inv_t` and
/// `e_i = exp(-s_i)`.
#[inline]
pub(crate) fn exp_moments(logits: &[f64], max: f64, inv_t: f64) -> (f64, f64) {
    let (mut sum, mut weighted) = (0.0, 0.0);
    for &l in logits {
        let s = (max - l) * inv_t;
        let e = (-s).exp();
        sum += e;
        weighted += e * s;
    }
    (sum, weighted)
}
