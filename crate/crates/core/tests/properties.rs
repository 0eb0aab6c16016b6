use std::collections::BTreeMap;

use proptest::prelude::*;

use helix_core::manifold::{BuildMetadata, Manifold, RunningStats};
use helix_core::metrics::{ngram_jaccard, sac, NgramJaccard};
use helix_core::scoring::{entropy, handover_weight, HandoverParams};
use helix_core::steering::{adaptive_threshold, argmax, penalty, steer_logits, PenaltyShape, SteeringConfig};
use helix_core::synthesis::dedupe;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn shape() -> impl Strategy<Value = PenaltyShape> {
    prop_oneof![Just(PenaltyShape::PaperLiteral), Just(PenaltyShape::BoundaryContinuous)]
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 0..12)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn entropy_is_bounded(z in prop::collection::vec(-30.0f64..30.0, 2..200)) {
        let h = entropy(&z).unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (z.len() as f64).ln() * (1.0 + 1e-12));
    }

    #[test]
    fn handover_decreases(a in 0.01f64..10.0, b in 0.01f64..10.0) {
        let p = HandoverParams::default();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(handover_weight(lo, &p) >= handover_weight(hi, &p));
    }

    #[test]
    fn threshold_never_rises(a in 0.01f64..10.0, b in 0.01f64..10.0, gamma in 0.0f64..3.0) {
        let cfg = SteeringConfig { gamma, ..Default::default() };
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(adaptive_threshold(lo, &cfg) >= adaptive_threshold(hi, &cfg));
    }

    #[test]
    fn penalty_is_monotone_and_capped(
        u1 in 0.0f64..1.0,
        u2 in 0.0f64..1.0,
        tau in 0.05f64..1.0,
        scale in 0.0f64..10.0,
        shape in shape(),
    ) {
        let cfg = SteeringConfig { penalty_scale: scale, penalty_shape: shape, ..Default::default() };
        let (lo, hi) = if u1 < u2 { (u1, u2) } else { (u2, u1) };
        let (p_lo, p_hi) = (penalty(lo, tau, &cfg), penalty(hi, tau, &cfg));
        prop_assert!(p_lo >= p_hi);
        prop_assert!((0.0..=scale).contains(&p_lo));
        if hi >= tau {
            prop_assert_eq!(p_hi, 0.0);
        }
    }

    #[test]
    fn steering_moves_mass_off_the_argmax(
        z in prop::collection::vec(-10.0f64..10.0, 2..64),
        uts in 0.0f64..0.49,
    ) {
        let cfg = SteeringConfig::default();
        let (out, p) = steer_logits(&z, uts, 0.5, &cfg).unwrap();
        prop_assert!(p > 0.0);
        let k = argmax(&z);
        for i in 0..z.len() {
            if i != k {
                prop_assert_eq!(out[i].to_bits(), z[i].to_bits());
            }
        }
        let (before, after) = (softmax(&z), softmax(&out));
        prop_assert!(after[k] < before[k]);
        // the remaining tokens all gain by the same factor
        let factor = (1.0 - after[k]) / (1.0 - before[k]);
        for i in (0..z.len()).filter(|&i| i != k) {
            prop_assert!((after[i] - before[i] * factor).abs() <= 1e-12 + 1e-9 * after[i]);
        }
    }

    #[test]
    fn jaccard_is_a_similarity(a in sentence(), b in sentence(), n in 1usize..4) {
        let s = ngram_jaccard(&a, &b, n);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, ngram_jaccard(&b, &a, n));
        prop_assert_eq!(ngram_jaccard(&a, &a, n), 1.0);
    }

    #[test]
    fn sac_ignores_order(texts in prop::collection::vec(sentence(), 2..10), seed in any::<u64>()) {
        let sim = NgramJaccard::default();
        let mut shuffled = texts.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(sac(&texts, &sim, 0.7).unwrap(), sac(&shuffled, &sim, 0.7).unwrap());
    }

    #[test]
    fn clusters_partition_and_grow_with_theta(texts in prop::collection::vec(sentence(), 1..12)) {
        let sim = NgramJaccard::default();
        let mut last = 0;
        for theta in [0.1, 0.3, 0.5, 0.7, 0.9, 1.01] {
            let clusters = dedupe(&texts, &sim, theta);
            let mut seen: Vec<usize> = clusters.iter().flat_map(|c| c.members.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..texts.len()).collect::<Vec<_>>());
            for c in &clusters {
                prop_assert!(c.members.contains(&c.representative));
            }
            prop_assert!(clusters.len() >= last);
            last = clusters.len();
        }
    }

    #[test]
    fn streaming_moments_match_batch(
        rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 3), 2..40),
        split in 0usize..40,
    ) {
        let mut all = RunningStats::new();
        for r in &rows {
            all.push(r).unwrap();
        }
        let n = rows.len() as f64;
        let cov = all.covariance().unwrap();
        let mean: Vec<f64> = (0..3).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
        for i in 0..3 {
            prop_assert!((all.mean()[i] - mean[i]).abs() <= 1e-9 * (1.0 + mean[i].abs()));
            for j in 0..3 {
                let c: f64 = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0);
                prop_assert!((cov[i * 3 + j] - c).abs() <= 1e-8 * (1.0 + c.abs()));
            }
        }
        let k = split.min(rows.len());
        let (mut a, mut b) = (RunningStats::new(), RunningStats::new());
        rows[..k].iter().for_each(|r| a.push(r).unwrap());
        rows[k..].iter().for_each(|r| b.push(r).unwrap());
        a.merge(&b).unwrap();
        prop_assert_eq!(a.count(), all.count());
        for (x, y) in a.covariance().unwrap().iter().zip(&cov) {
            prop_assert!((x - y).abs() <= 1e-8 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn manifold_bytes_round_trip(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 6..30),
        d_ref in 0.1f64..10.0,
    ) {
        let mut s = RunningStats::new();
        rows.iter().for_each(|r| s.push(r).unwrap());
        let layer = s.finalize(7, 1e-5).unwrap().with_d_ref(d_ref).unwrap();
        let m = Manifold::new(vec![layer], BuildMetadata::default()).unwrap();
        let bytes = m.to_bytes();
        let back = Manifold::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let probe = &rows[0];
        prop_assert_eq!(
            back.layer(7).unwrap().mahalanobis(probe).unwrap().to_bits(),
            m.layer(7).unwrap().mahalanobis(probe).unwrap().to_bits()
        );
    }
}

#[test]
fn corrupt_manifold_bytes_are_rejected() {
    let mut s = RunningStats::new();
    for i in 0..10 {
        s.push(&[i as f64, (i * i) as f64]).unwrap();
    }
    let m = Manifold::new(vec![s.finalize(1, 1e-5).unwrap()], BuildMetadata::default()).unwrap();
    let bytes = m.to_bytes();
    let mut bad = BTreeMap::new();
    for pos in [0, 5, 20, bytes.len() - 1] {
        let mut b = bytes.clone();
        b[pos] ^= 0x40;
        bad.insert(pos, Manifold::from_bytes(&b).is_err());
    }
    assert!(bad.values().all(|&e| e), "{bad:?}");
    assert!(Manifold::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
