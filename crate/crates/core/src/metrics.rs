//! Output-quality metrics.
//!
//! * SAC: fraction of output pairs whose similarity is below `theta_dup`.
//! * LC: fraction of outputs whose perplexity is below `tau_ppl`.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_THETA_DUP: f64 = 0.7;
pub const DEFAULT_TAU_PPL: f64 = 15.0;

/// Symmetric similarity in `[0, 1]` with `sim(x, x) = 1`.
pub trait SimilarityProvider: Send + Sync {
    fn id(&self) -> String;
    fn sim(&self, a: &str, b: &str) -> f64;
}

pub trait PerplexityProvider: Send + Sync {
    fn id(&self) -> String;
    fn ppl(&self, text: &str) -> Result<f64>;
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_set(words: &[String], n: usize) -> HashSet<String> {
    words.windows(n).map(|w| w.join("\u{1f}")).collect()
}

/// Jaccard overlap of lowercase word n-gram sets. When either text has fewer
/// than `n` words both are compared as unigram sets.
pub fn ngram_jaccard(a: &str, b: &str, n: usize) -> f64 {
    let n = n.max(1);
    let (wa, wb) = (words(a), words(b));
    match (wa.is_empty(), wb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let n = if wa.len() < n || wb.len() < n { 1 } else { n };
    let (sa, sb) = (ngram_set(&wa, n), ngram_set(&wb, n));
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy)]
pub struct NgramJaccard {
    pub n: usize,
}

impl Default for NgramJaccard {
    fn default() -> Self {
        Self { n: 2 }
    }
}

impl SimilarityProvider for NgramJaccard {
    fn id(&self) -> String {
        format!("ngram-jaccard-{}", self.n)
    }

    fn sim(&self, a: &str, b: &str) -> f64 {
        ngram_jaccard(a, b, self.n)
    }
}

/// Deterministic pseudo-perplexity from length and word repetition. Short and
/// repetitive texts score high; stands in for a real language model in tests
/// and offline runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubPerplexity;

impl PerplexityProvider for StubPerplexity {
    fn id(&self) -> String {
        "stub-length-repetition".into()
    }

    fn ppl(&self, text: &str) -> Result<f64> {
        let w = words(text);
        if w.is_empty() {
            return Err(Error::Empty("text for perplexity"));
        }
        let distinct = w.iter().collect::<HashSet<_>>().len();
        let repetition = 1.0 - distinct as f64 / w.len() as f64;
        Ok(5.0 + 25.0 * repetition + 20.0 / w.len() as f64)
    }
}

/// Fraction of unordered pairs with `sim < theta_dup`, equal to the
/// ordered-pair form by symmetry. Needs at least two outputs.
pub fn sac<S: AsRef<str> + Sync>(
    outputs: &[S],
    provider: &dyn SimilarityProvider,
    theta_dup: f64,
) -> Result<f64> {
    let n = outputs.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "SAC is undefined for {n} output(s); need at least 2"
        )));
    }
    let distinct: usize = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = outputs[i].as_ref();
            outputs[i + 1..]
                .iter()
                .filter(|b| provider.sim(a, b.as_ref()) < theta_dup)
                .count()
        })
        .sum();
    let pairs = n * (n - 1) / 2;
    Ok(distinct as f64 / pairs as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcReport {
    pub lc: f64,
    /// Mean over outputs the provider scored; `None` if it scored none.
    pub mean_ppl: Option<f64>,
    /// Indices where the provider failed; counted as incoherent.
    pub failures: Vec<usize>,
}

pub fn lc<S: AsRef<str>>(
    outputs: &[S],
    provider: &dyn PerplexityProvider,
    tau_ppl: f64,
) -> Result<LcReport> {
    if outputs.is_empty() {
        return Err(Error::Empty("outputs for LC"));
    }
    let mut coherent = 0usize;
    let mut failures = Vec::new();
    let mut ppl_sum = 0.0;
    let mut scored = 0usize;
    for (i, o) in outputs.iter().enumerate() {
        match provider.ppl(o.as_ref()) {
            Ok(p) if p > 0.0 && p.is_finite() => {
                scored += 1;
                ppl_sum += p;
                if p < tau_ppl {
                    coherent += 1;
                }
            }
            Ok(p) => {
                log::warn!("perplexity provider returned {p} for output {i}; counted incoherent");
                failures.push(i);
            }
            Err(e) => {
                log::warn!("perplexity provider failed on output {i}: {e}; counted incoherent");
                failures.push(i);
            }
        }
    }
    Ok(LcReport {
        lc: coherent as f64 / outputs.len() as f64,
        mean_ppl: (scored > 0).then(|| ppl_sum / scored as f64),
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub temperature: f64,
    pub n: usize,
    pub sac: Option<f64>,
    pub lc: f64,
    pub mean_ppl: Option<f64>,
    pub provider_id: String,
    pub theta_dup: f64,
    pub tau_ppl: f64,
}

impl MetricsRow {
    pub fn compute<S: AsRef<str> + Sync>(
        temperature: f64,
        outputs: &[S],
        sim: &dyn SimilarityProvider,
        ppl: &dyn PerplexityProvider,
        theta_dup: f64,
        tau_ppl: f64,
    ) -> Result<Self> {
        let lc = lc(outputs, ppl, tau_ppl)?;
        Ok(Self {
            temperature,
            n: outputs.len(),
            sac: sac(outputs, sim, theta_dup).ok(),
            lc: lc.lc,
            mean_ppl: lc.mean_ppl,
            provider_id: format!("{}+{}", sim.id(), ppl.id()),
            theta_dup,
            tau_ppl,
        })
    }
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
