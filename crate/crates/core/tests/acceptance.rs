//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::io;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use helix_core::backend::{estimate_effective_temperature, Backend, SyntheticBackend, SyntheticSpec};
use helix_core::manifold::{ActivationSample, BuildMetadata, Manifold, ManifoldBuilder, RunningStats};
use helix_core::metrics::{lc, sac, NgramJaccard, StubPerplexity, DEFAULT_TAU_PPL, DEFAULT_THETA_DUP};
use helix_core::scoring::{
    entropy, handover_weight, manifold_confidence, semantic_confidence, unified_truth_score, HandoverParams,
};
use helix_core::steering::{
    adaptive_threshold, generate, penalty, FinishReason, GenerateOptions, GenerationTrace, PenaltyShape,
    SteeringConfig, SteeringMode,
};
use helix_core::synthesis::{
    default_ranges, sweep, EngineConfig, SweepOutput, SweepReport, DEFAULT_GRID,
};
use helix_core::telemetry::{JsonlSink, TelemetryRecord, TelemetrySink};

const WORLD: u64 = 11;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    }
}

/// Compensated sum.
fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

// ---------------------------------------------------------------- 1

fn oracle_entropy(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let k = z.iter().position(|&v| v == m).unwrap();
    let rest = neumaier(z.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, &v)| (v - m).exp()));
    let log_z = m + rest.ln_1p();
    neumaier(z.iter().map(|&v| {
        let lp = v - log_z;
        -lp.exp() * lp
    }))
}

fn oracle_beta(t: f64, kappa: f64, t_c: f64) -> f64 {
    let a = kappa * (t - t_c);
    if a > 0.0 {
        let e = (-a).exp();
        e / (1.0 + e)
    } else {
        0.5 * (1.0 - (a / 2.0).tanh())
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    let cfg = SteeringConfig::default();
    let params = HandoverParams::default();
    for _ in 0..1000 {
        let v = rng.random_range(2..2000usize);
        let s = rng.random_range(0.1..5.0);
        let shift = rng.random_range(-20.0..20.0);
        let z: Vec<f64> = (0..v).map(|_| shift + s * rng.sample::<f64, _>(StandardNormal)).collect();
        let h = entropy(&z).unwrap();
        let ho = oracle_entropy(&z);
        note("entropy", rel_err(h, ho));
        let se = semantic_confidence(h, v).unwrap();
        note("s_e", rel_err(se, (1.0 - ho / (v as f64).ln()).clamp(0.0, 1.0)));
    }
    for _ in 0..1000 {
        let d = rng.random_range(0.0..50.0);
        let d_ref = rng.random_range(0.1..10.0);
        note("s_d", rel_err(manifold_confidence(d, d_ref).unwrap(), 1.0 / (d / d_ref).exp()));
        let t = rng.random_range(0.05..6.0);
        note("beta", rel_err(handover_weight(t, &params), oracle_beta(t, params.kappa, params.t_c)));
        let (b, se, sd) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        note("uts", rel_err(unified_truth_score(b, se, sd), sd + b * (se - sd)));
        let tau_o = if t <= cfg.t_base { cfg.tau0 } else { cfg.tau0 / (1.0 + cfg.gamma * (t - cfg.t_base)) };
        note("tau", rel_err(adaptive_threshold(t, &cfg), tau_o));
        let tau = tau_o;
        let uts = rng.random_range(0.0..1.0);
        let x: f64 = tau - uts;
        let (lit_o, cont_o) = if x > 0.0 {
            let e = (-x).exp();
            (cfg.penalty_scale / (1.0 + e), cfg.penalty_scale * -(-x).exp_m1() / (1.0 + e))
        } else {
            (0.0, 0.0)
        };
        let lit = SteeringConfig { penalty_shape: PenaltyShape::PaperLiteral, ..cfg.clone() };
        let cont = SteeringConfig { penalty_shape: PenaltyShape::BoundaryContinuous, ..cfg.clone() };
        note("penalty", rel_err(penalty(uts, tau, &lit), lit_o));
        note("penalty", rel_err(penalty(uts, tau, &cont), cont_o));
    }
    let b15 = handover_weight(1.5, &params);
    let b05 = handover_weight(0.5, &params);
    let b30 = handover_weight(3.0, &params);
    let fixed = b15 == 0.5 && (b05 - 0.88080).abs() <= 1e-5 && (b30 - 0.04743).abs() <= 1e-5;
    let max = worst.values().cloned().fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    outcome(
        max <= 1e-8 && fixed,
        format!(
            "max rel err {max:.2e} [{}]; beta(0.5)={b05:.5} beta(1.5)={b15} beta(3.0)={b30:.5}",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lambda = 1e-5;
    let mut worst = 0.0f64;
    for case in 0..500 {
        let d = 2 + case % 9;
        let n = rng.random_range(2 * d..10 * d + 1);
        let a: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
        let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                (0..d).map(|i| offset[i] + (0..d).map(|j| a[i * d + j] * g[j]).sum::<f64>()).collect()
            })
            .collect();
        let mut stats = RunningStats::new();
        for s in &samples {
            stats.push(s).unwrap();
        }
        let layer = stats.finalize(0, lambda).unwrap();

        let mean: Vec<f64> = (0..d).map(|i| neumaier(samples.iter().map(|s| s[i])) / n as f64).collect();
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let c = neumaier(samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])));
                cov[(i, j)] = c / (n - 1) as f64 + if i == j { lambda } else { 0.0 };
            }
        }
        let inv = cov.try_inverse().expect("regularized covariance is invertible");
        for _ in 0..4 {
            let h: Vec<f64> = (0..d).map(|i| mean[i] + 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let delta = DVector::from_iterator(d, (0..d).map(|i| h[i] - mean[i]));
            let want = (delta.transpose() * &inv * &delta)[(0, 0)].sqrt();
            worst = worst.max(rel_err(layer.mahalanobis(&h).unwrap(), want));
        }
    }
    outcome(worst <= 1e-8, format!("500 SPD cases, d in 2..=10, max rel err {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..d)
            .map(|i| mu[i] + (0..d).map(|j| a[i * d + j] * g[j]).sum::<f64>() + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let mut builder = ManifoldBuilder::new(1e-5, 0.1).unwrap();
    for _ in 0..10_000 {
        let x = draw(&mut rng);
        builder.push(&ActivationSample::new(0, x)).unwrap();
    }
    let held: Vec<Vec<f64>> = builder.held_out(0).to_vec();
    let manifold = builder.build(BuildMetadata::default()).unwrap();
    let layer = manifold.layer(0).unwrap();
    let frac = |xs: &[Vec<f64>]| {
        let ok = xs
            .iter()
            .filter(|x| manifold_confidence(layer.mahalanobis(x).unwrap(), layer.d_ref()).unwrap() >= 0.6)
            .count();
        ok as f64 / xs.len() as f64
    };
    let fresh: Vec<Vec<f64>> = (0..10_000).map(|_| draw(&mut rng)).collect();
    let (fh, ff) = (frac(&held), frac(&fresh));
    outcome(
        (0.66..=0.71).contains(&fh),
        format!("held-out ({} samples) S_D>=0.6 fraction {fh:.4}; fresh-sample fraction {ff:.4}", held.len()),
    )
}

// ---------------------------------------------------------------- 4, 7

struct RateRun {
    steered: usize,
    tokens: usize,
}

impl RateRun {
    fn rate(&self) -> f64 {
        self.steered as f64 / self.tokens as f64
    }
}

fn steering_rate(
    spec: &SyntheticSpec,
    manifold: &Manifold,
    temperature: f64,
    cfg: &SteeringConfig,
    trajectories: usize,
    len: usize,
) -> RateRun {
    let opts = GenerateOptions {
        max_tokens: len,
        ..GenerateOptions::default()
    };
    let counts: Vec<(usize, usize)> = (0..trajectories)
        .into_par_iter()
        .map(|i| {
            let mut b = SyntheticBackend::new(spec.clone().with_seed(1_000 + i as u64)).unwrap();
            let t = generate(&mut b, manifold, "q", temperature, cfg, &opts, 7_000 + i as u64, None).unwrap();
            assert_eq!(t.finish, FinishReason::MaxTokens);
            (t.steered_count(), t.records.len())
        })
        .collect();
    RateRun {
        steered: counts.iter().map(|c| c.0).sum(),
        tokens: counts.iter().map(|c| c.1).sum(),
    }
}

fn world_manifold(spec: &SyntheticSpec) -> Manifold {
    SyntheticBackend::build_manifold(spec, 20_000, 1e-5, 0.1).unwrap()
}

fn criterion_4() -> Outcome {
    let spec = SyntheticSpec::divergence_prone(WORLD);
    let manifold = world_manifold(&spec);
    let cfg = SteeringConfig::default();
    let grid = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
    let rates: Vec<RateRun> = grid.iter().map(|&t| steering_rate(&spec, &manifold, t, &cfg, 400, 500)).collect();
    let monotone = rates.windows(2).all(|w| w[1].rate() >= w[0].rate());
    let enough = rates.iter().all(|r| r.tokens >= 10_000);
    let parts: Vec<String> = grid
        .iter()
        .zip(&rates)
        .map(|(t, r)| format!("T={t}: {:.3}%", 100.0 * r.rate()))
        .collect();
    outcome(
        monotone && enough,
        format!("{} tokens/point; {}", rates[0].tokens, parts.join(", ")),
    )
}

fn criterion_7() -> Outcome {
    let cfg = SteeringConfig::default();
    let on = SyntheticSpec::on_manifold(WORLD);
    let prone = SyntheticSpec::divergence_prone(WORLD);
    let manifold = world_manifold(&prone);
    let mut on_worst = 0.0f64;
    let mut on_total = RateRun { steered: 0, tokens: 0 };
    let mut prone_rates = Vec::new();
    for &t in &DEFAULT_GRID {
        let r = steering_rate(&on, &manifold, t, &cfg, 100, 500);
        on_worst = on_worst.max(r.rate());
        on_total.steered += r.steered;
        on_total.tokens += r.tokens;
        prone_rates.push(steering_rate(&prone, &manifold, t, &cfg, 100, 500).rate());
    }
    let lo = prone_rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = prone_rates.iter().cloned().fold(0.0, f64::max);
    outcome(
        on_worst < 1e-3 && lo >= 1e-3 && hi <= 0.05,
        format!(
            "on-manifold {}/{} steered (worst grid point {:.4}%); divergence-prone {:.3}%..{:.3}% over 11 grid points",
            on_total.steered,
            on_total.tokens,
            100.0 * on_worst,
            100.0 * lo,
            100.0 * hi
        ),
    )
}

// ---------------------------------------------------------------- 5

fn divergent_fraction(trace: &GenerationTrace, layer: u32, d_ref: f64) -> f64 {
    let far = trace.records.iter().filter(|r| r.d_layers[&layer] > 3.0 * d_ref).count();
    far as f64 / trace.records.len() as f64
}

/// One-sided exact binomial tail `P(X >= k)` for `X ~ Bin(n, 1/2)`.
fn sign_test(k: usize, n: usize) -> f64 {
    let mut log_c = 0.0f64;
    let mut tail = 0.0;
    for i in 0..=n {
        if i > 0 {
            log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            tail += (log_c - n as f64 * std::f64::consts::LN_2).exp();
        }
    }
    tail
}

fn criterion_5() -> Outcome {
    let spec = SyntheticSpec::divergence_prone(WORLD);
    let manifold = world_manifold(&spec);
    let cfg = SteeringConfig::default();
    let layer = 4;
    let d_ref = manifold.layer(layer).unwrap().d_ref();
    let run = |mode: SteeringMode, i: u64| {
        let opts = GenerateOptions {
            max_tokens: 2_000,
            mode,
            ..GenerateOptions::default()
        };
        let mut b = SyntheticBackend::new(spec.clone().with_seed(50_000 + i)).unwrap();
        let t = generate(&mut b, &manifold, "q", 3.0, &cfg, &opts, 90_000 + i, None).unwrap();
        divergent_fraction(&t, layer, d_ref)
    };
    let pairs: Vec<(f64, f64)> = (0..40u64)
        .into_par_iter()
        .map(|i| (run(SteeringMode::Enabled, i), run(SteeringMode::ObserveOnly, i)))
        .collect();
    let wins = pairs.iter().filter(|(on, off)| on < off).count();
    let losses = pairs.iter().filter(|(on, off)| on > off).count();
    let p = sign_test(wins, wins + losses);
    let mean_on = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    let mean_off = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    outcome(
        p < 0.05 && mean_on < mean_off,
        format!(
            "40 paired trajectories x 2000 steps at T=3: D>3 d_ref fraction {:.3}% steered vs {:.3}% unsteered; {wins} lower, {losses} higher, sign test p={p:.2e}",
            100.0 * mean_on,
            100.0 * mean_off
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    // tighter truthful regime so the stream stays confident at this width
    let world = SyntheticSpec {
        truth_cov_scale: 0.5,
        ..SyntheticSpec::planted(WORLD, 256, 4096, &[4, 12, 20]).with_drift(0.0)
    };
    let manifold = SyntheticBackend::build_manifold(&world, 4_000, 1e-5, 0.1).unwrap();
    // one distance evaluation per token
    let cfg = SteeringConfig::default().with_layers(vec![12]);
    let rounds = 10;
    let per_round = 5_000;
    let mut elapsed = BTreeMap::from([(false, Duration::ZERO), (true, Duration::ZERO)]);
    let mut tokens = BTreeMap::from([(false, 0usize), (true, 0usize)]);
    let mut steered = 0;
    for round in 0..rounds {
        let order = if round % 2 == 0 { [true, false] } else { [false, true] };
        for enabled in order {
            let opts = GenerateOptions {
                max_tokens: per_round,
                mode: if enabled { SteeringMode::Enabled } else { SteeringMode::Disabled },
                ..GenerateOptions::default()
            };
            let mut b = SyntheticBackend::new(world.clone().with_seed(round as u64)).unwrap();
            let start = Instant::now();
            let t = generate(&mut b, &manifold, "q", 1.0, &cfg, &opts, round as u64, None).unwrap();
            *elapsed.get_mut(&enabled).unwrap() += start.elapsed();
            *tokens.get_mut(&enabled).unwrap() += t.tokens.len();
            steered += t.steered_count();
        }
    }
    let per_tok = |m: bool| elapsed[&m].as_secs_f64() / tokens[&m] as f64;
    let ratio = per_tok(true) / per_tok(false);
    outcome(
        ratio <= 1.15 && tokens[&true] >= 50_000 && tokens[&false] >= 50_000,
        format!(
            "d=256 V=4096, {} tokens/mode: {:.1} us/token enabled, {:.1} us/token disabled, ratio {ratio:.3}; {steered} steered",
            tokens[&true],
            1e6 * per_tok(true),
            1e6 * per_tok(false)
        ),
    )
}

// ---------------------------------------------------------------- 8

/// Texts from disjoint vocabularies; members of a family share a 40-word base
/// with one word swapped.
fn family_texts(rng: &mut ChaCha8Rng, family: usize, members: usize) -> Vec<String> {
    let base: Vec<String> = (0..40).map(|w| format!("f{family}w{w}")).collect();
    (0..members)
        .map(|m| {
            let mut words = base.clone();
            let pos = rng.random_range(0..40);
            words[pos] = format!("f{family}x{m}");
            words.join(" ")
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sim = NgramJaccard::default();
    let mut worst_sac = 0.0f64;
    for _ in 0..30 {
        let families = rng.random_range(1..12);
        let mut texts = Vec::new();
        let mut within = 0usize;
        for f in 0..families {
            let m = rng.random_range(1..8);
            within += m * (m - 1) / 2;
            texts.extend(family_texts(&mut rng, f, m));
        }
        if texts.len() < 2 {
            continue;
        }
        let n = texts.len();
        let planted = within as f64 / (n * (n - 1) / 2) as f64;
        let got = sac(&texts, &sim, DEFAULT_THETA_DUP).unwrap();
        worst_sac = worst_sac.max((got - (1.0 - planted)).abs());
    }

    let stub = StubPerplexity;
    let mut lc_mismatch = 0;
    let mut cases = 0;
    while cases < 100 {
        let n = rng.random_range(1..20);
        let mut texts = Vec::new();
        let mut coherent = 0;
        let mut ppl_sum = 0.0;
        let mut boundary = false;
        for _ in 0..n {
            let len = rng.random_range(1..60usize);
            let distinct = rng.random_range(1..=len);
            // ppl < 15  <=>  15 len - 25 distinct + 20 < 0
            let key = 15 * len as i64 - 25 * distinct as i64 + 20;
            boundary |= key == 0;
            coherent += (key < 0) as usize;
            ppl_sum += 5.0 + 25.0 * (1.0 - distinct as f64 / len as f64) + 20.0 / len as f64;
            let words: Vec<String> = (0..len).map(|i| format!("t{}", i.min(distinct - 1))).collect();
            texts.push(words.join(" "));
        }
        if boundary {
            continue;
        }
        cases += 1;
        let r = lc(&texts, &stub, DEFAULT_TAU_PPL).unwrap();
        let mean_ok = rel_err(r.mean_ppl.unwrap(), ppl_sum / n as f64) < 1e-12;
        if r.lc != coherent as f64 / n as f64 || !mean_ok || !r.failures.is_empty() {
            lc_mismatch += 1;
        }
    }
    outcome(
        worst_sac <= 0.02 && lc_mismatch == 0,
        format!("SAC max |err| {worst_sac:.4} over 30 planted corpora; LC {lc_mismatch}/100 mismatches"),
    )
}

// ---------------------------------------------------------------- 9

fn planted_output(id: usize, temperature: f64, text: String) -> SweepOutput {
    SweepOutput {
        id,
        temperature,
        sample: 0,
        seed: id as u64,
        trace: Some(GenerationTrace {
            prompt: "p".into(),
            temperature,
            tokens: vec![],
            text,
            records: vec![],
            finish: FinishReason::MaxTokens,
            error: None,
            telemetry_degraded: false,
        }),
        error: None,
    }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples = 10;
    let mut outputs = Vec::new();
    let mut next_family = 2;
    let mut member = 0;
    for &t in &DEFAULT_GRID {
        // low temperatures share two families; hotter ones draw from their own, larger pools
        let pool: Vec<usize> = if t <= 1.0 {
            vec![0, 1]
        } else {
            let size = if t <= 2.0 { 4 } else { 8 };
            let p = (next_family..next_family + size).collect();
            next_family += size;
            p
        };
        for s in 0..samples {
            let f = if s < pool.len() { pool[s] } else { pool[rng.random_range(0..pool.len())] };
            member += 1;
            let text = family_texts(&mut rng, f, 1).pop().unwrap().replace("x0", &format!("x{member}"));
            outputs.push(planted_output(outputs.len(), t, text));
        }
    }
    let sim = NgramJaccard::default();
    let report = SweepReport::assemble("p", &DEFAULT_GRID, outputs, &sim, DEFAULT_THETA_DUP, &default_ranges());
    let best = DEFAULT_GRID.iter().map(|&t| report.unique_at(t)).max().unwrap();
    let dup: Vec<f64> = report.per_range_stats.iter().map(|r| r.duplication_rate.unwrap()).collect();
    let decreasing = dup.windows(2).all(|w| w[1] < w[0]);
    outcome(
        report.unique_total >= 2 * best && decreasing && report.unique_total == next_family,
        format!(
            "unique_total {} vs best single temperature {best} ({:.1}x); duplication low/mid/high {}",
            report.unique_total,
            report.unique_total as f64 / best as f64,
            dup.iter().map(|d| format!("{:.1}%", 100.0 * d)).collect::<Vec<_>>().join(" / ")
        ),
    )
}

// ---------------------------------------------------------------- 10

struct FlakySink {
    emitted: usize,
    fail_after: usize,
}

impl TelemetrySink for FlakySink {
    fn emit(&mut self, _: &TelemetryRecord) -> io::Result<()> {
        self.emitted += 1;
        if self.emitted > self.fail_after {
            Err(io::Error::other("disk full"))
        } else {
            Ok(())
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        Err(io::Error::other("disk full"))
    }
}

fn criterion_10() -> Outcome {
    let spec = SyntheticSpec::divergence_prone(WORLD);
    let manifold = SyntheticBackend::build_manifold(&spec, 5_000, 1e-5, 0.1).unwrap();
    let mut problems = Vec::new();

    let bytes = manifold.to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.hlxm");
    manifold.save(&path).unwrap();
    let loaded = Manifold::load(&path).unwrap();
    if std::fs::read(&path).unwrap() != bytes || loaded.to_bytes() != bytes || loaded != manifold {
        problems.push("manifold round trip");
    }

    let cfg = SteeringConfig::default();
    let opts = GenerateOptions {
        max_tokens: 400,
        ..GenerateOptions::default()
    };
    let run = |sink: Option<&mut dyn TelemetrySink>| {
        let mut b = SyntheticBackend::new(spec.clone().with_seed(77)).unwrap();
        generate(&mut b, &manifold, "q", 2.5, &cfg, &opts, 78, sink).unwrap()
    };
    let with_jsonl = || {
        let mut sink = JsonlSink::new(Vec::new());
        let t = run(Some(&mut sink));
        (serde_json::to_string(&t).unwrap(), sink.into_inner().unwrap())
    };
    let (t1, j1) = with_jsonl();
    let (t2, j2) = with_jsonl();
    if t1 != t2 {
        problems.push("trace bytes");
    }
    if j1 != j2 || j1.is_empty() {
        problems.push("telemetry bytes");
    }

    let plain = run(None);
    let mut flaky = FlakySink { emitted: 0, fail_after: 5 };
    let degraded = run(Some(&mut flaky));
    if plain.tokens != degraded.tokens || !degraded.telemetry_degraded || plain.telemetry_degraded {
        problems.push("failing sink");
    }

    let engine = EngineConfig {
        steering: cfg.clone(),
        options: GenerateOptions {
            max_tokens: 40,
            ..GenerateOptions::default()
        },
        base_seed: 5,
    };
    let factory = |seed: u64| -> helix_core::Result<Box<dyn Backend>> {
        Ok(Box::new(SyntheticBackend::new(spec.clone().with_seed(seed))?))
    };
    let report = || {
        let outs = sweep("q", &DEFAULT_GRID, &manifold, &factory, &engine, 3).unwrap();
        SweepReport::assemble("q", &DEFAULT_GRID, outs, &NgramJaccard::default(), DEFAULT_THETA_DUP, &default_ranges())
            .to_json()
            .unwrap()
    };
    if report() != report() {
        problems.push("sweep report bytes");
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "manifold file ({} bytes) round-trips; trace, telemetry ({} bytes) and sweep report are byte-identical on rerun; failing sink leaves {} tokens unchanged",
                bytes.len(),
                j1.len(),
                plain.tokens.len()
            )
        } else {
            format!("mismatch: {}", problems.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Outcome {
    let mut z = vec![0.0; 32];
    z[0] = 6.0;
    z[1] = 3.0;
    z[2] = 1.5;
    let t = 1.0;
    let t0 = estimate_effective_temperature(&z, 0.0, t, 1_000, 0).unwrap();
    let sweep = [0.2, 0.4, 0.6, 0.8, 1.0];
    let te: Vec<f64> = sweep
        .iter()
        .map(|&s| estimate_effective_temperature(&z, s, t, 4_000, 42).unwrap())
        .collect();
    let increasing = std::iter::once(t0).chain(te.iter().cloned()).collect::<Vec<_>>().windows(2).all(|w| w[1] > w[0]);
    outcome(
        (t0 - t).abs() <= 1e-3 && increasing,
        format!(
            "noise 0: T_eff={t0:.6}; noise {:?}: T_noise = {}",
            sweep,
            te.iter().map(|x| format!("{:+.4}", x - t)).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() -> ExitCode {
    type Check = (u32, &'static str, Option<f64>, fn() -> Outcome);
    let checks: [Check; 11] = [
        (1, "formula fidelity", Some(10.0), criterion_1),
        (2, "mahalanobis vs explicit inverse", Some(5.0), criterion_2),
        (3, "distance calibration", Some(30.0), criterion_3),
        (4, "steering-rate trend", Some(120.0), criterion_4),
        (5, "trajectory tethering", Some(120.0), criterion_5),
        (6, "scoring overhead", Some(180.0), criterion_6),
        (7, "intervention sparsity", None, criterion_7),
        (8, "SAC / LC", None, criterion_8),
        (9, "multi-temperature gain", Some(60.0), criterion_9),
        (10, "serialization and determinism", None, criterion_10),
        (11, "effective temperature", None, criterion_11),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, budget, check) in checks {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let secs = start.elapsed().as_secs_f64();
        let in_budget = budget.is_none_or(|b| secs < b);
        let pass = o.pass && in_budget;
        failed += !pass as usize;
        let limit = budget.map(|b| format!(" / {b:.0} s")).unwrap_or_default();
        println!(
            "[{}] {n:>2}. {name}: {} ({secs:.2} s{limit})",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
