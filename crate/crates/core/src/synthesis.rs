//! Multi-temperature sweeps.
//!
//! One prompt is generated at every temperature of a grid, several samples
//! each. Outputs are then grouped into concept clusters (single-link: two
//! outputs are joined when their similarity reaches `theta`) and summarized
//! per temperature range.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::manifold::Manifold;
use crate::metrics::{MetricsRow, PerplexityProvider, SimilarityProvider};
use crate::steering::{generate, GenerateOptions, GenerationTrace, SteeringConfig};

pub const DEFAULT_GRID: [f64; 11] = [0.5, 0.7, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0];

/// Parses `start:stop:step` (inclusive of `stop` up to rounding) or a comma
/// list. Values must be positive.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |m: String| Error::InvalidArgument(format!("grid {spec:?}: {m}"));
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| bad(format!("{:?} is not a number", s.trim())))
    };
    let grid = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:stop:step".into()));
        }
        let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || !(stop >= start) {
            return Err(bad("need step > 0 and stop >= start".into()));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        if count > 100_000 {
            return Err(bad("too many points".into()));
        }
        (0..count).map(|i| start + i as f64 * step).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() {
        return Err(bad("empty".into()));
    }
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(bad(format!("temperature {t} is not positive")));
    }
    Ok(grid)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sweep cell `(t_index, sample)`; independent of evaluation order.
pub fn cell_seed(base_seed: u64, t_index: usize, sample: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(base_seed) ^ t_index as u64) ^ sample as u64)
}

/// Builds a fresh backend for one sweep cell.
pub trait BackendFactory: Sync {
    fn create(&self, seed: u64) -> Result<Box<dyn Backend>>;
}

impl<F> BackendFactory for F
where
    F: Fn(u64) -> Result<Box<dyn Backend>> + Sync,
{
    fn create(&self, seed: u64) -> Result<Box<dyn Backend>> {
        self(seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub steering: SteeringConfig,
    pub options: GenerateOptions,
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub id: usize,
    pub temperature: f64,
    pub sample: usize,
    pub seed: u64,
    pub trace: Option<GenerationTrace>,
    pub error: Option<String>,
}

impl SweepOutput {
    pub fn text(&self) -> Option<&str> {
        self.trace.as_ref().map(|t| t.text.as_str())
    }
}

/// Runs every `(temperature, sample)` cell, in parallel, and returns the
/// outputs in grid order. A failing cell is recorded, not fatal.
pub fn sweep(
    prompt: &str,
    temperatures: &[f64],
    manifold: &Manifold,
    factory: &dyn BackendFactory,
    engine: &EngineConfig,
    samples_per_t: usize,
) -> Result<Vec<SweepOutput>> {
    if temperatures.is_empty() {
        return Err(Error::Empty("temperature grid"));
    }
    if samples_per_t == 0 {
        return Err(Error::InvalidArgument("samples per temperature must be >= 1".into()));
    }
    let cells: Vec<(usize, usize)> = (0..temperatures.len())
        .flat_map(|ti| (0..samples_per_t).map(move |s| (ti, s)))
        .collect();
    let outputs = cells
        .par_iter()
        .enumerate()
        .map(|(id, &(ti, sample))| {
            let temperature = temperatures[ti];
            let seed = cell_seed(engine.base_seed, ti, sample);
            let opts = GenerateOptions {
                stream_id: id as u64,
                ..engine.options.clone()
            };
            let result = factory.create(seed).and_then(|mut backend| {
                generate(
                    &mut backend,
                    manifold,
                    prompt,
                    temperature,
                    &engine.steering,
                    &opts,
                    splitmix64(seed),
                    None,
                )
            });
            let (trace, error) = match result {
                Ok(t) => {
                    let err = t.error.clone();
                    (Some(t), err)
                }
                Err(e) => (None, Some(e.to_string())),
            };
            SweepOutput {
                id,
                temperature,
                sample,
                seed,
                trace,
                error,
            }
        })
        .collect();
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub members: Vec<usize>,
    /// Member with the highest total similarity to the others (lowest id on ties).
    pub representative: usize,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller index as root keeps the result independent of union order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of the graph joining outputs with `sim >= theta`.
/// Members are indices into `texts`; clusters are ordered by first member.
pub fn dedupe<S: AsRef<str> + Sync>(
    texts: &[S],
    provider: &dyn SimilarityProvider,
    theta: f64,
) -> Vec<Cluster> {
    let n = texts.len();
    let sims: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| provider.sim(texts[i].as_ref(), texts[j].as_ref()))
                .collect()
        })
        .collect();
    let sim = |i: usize, j: usize| -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => sims[i][j - i - 1],
            std::cmp::Ordering::Greater => sims[j][i - j - 1],
        }
    };
    let mut set = DisjointSet::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if sim(i, j) >= theta {
                set.union(i, j);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = set.find(i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
        .into_iter()
        .map(|members| {
            let mut best = (f64::NEG_INFINITY, members[0]);
            for &m in &members {
                let total: f64 = members.iter().filter(|&&o| o != m).map(|&o| sim(m, o)).sum();
                if total > best.0 {
                    best = (total, m);
                }
            }
            Cluster {
                representative: best.1,
                members,
            }
        })
        .collect()
}

/// Temperatures in `(lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TempRange {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
}

impl TempRange {
    pub fn new(label: &str, lo: f64, hi: f64) -> Self {
        Self {
            label: label.to_owned(),
            lo,
            hi,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        t > self.lo && t <= self.hi
    }
}

/// Low (T <= 1.0), mid (1.0 < T <= 2.0) and high (T > 2.0).
pub fn default_ranges() -> Vec<TempRange> {
    vec![
        TempRange::new("low", 0.0, 1.0),
        TempRange::new("mid", 1.0, 2.0),
        TempRange::new("high", 2.0, f64::INFINITY),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub label: String,
    pub output_count: usize,
    /// Clusters with at least one member in the range.
    pub idea_count: usize,
    /// Fraction of in-range pairs with `sim >= theta`; undefined below two outputs.
    pub duplication_rate: Option<f64>,
    pub mean_uts: Option<f64>,
    pub steer_count: usize,
    pub token_count: usize,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub prompt: String,
    pub temperatures: Vec<f64>,
    pub outputs: Vec<SweepOutput>,
    pub clusters: Vec<Cluster>,
    pub per_range_stats: Vec<RangeStats>,
    pub unique_total: usize,
    pub similarity_provider: String,
    pub theta: f64,
}

impl SweepReport {
    /// Clusters the successful outputs and computes per-range statistics.
    /// Cluster members are output ids.
    pub fn assemble(
        prompt: &str,
        temperatures: &[f64],
        outputs: Vec<SweepOutput>,
        provider: &dyn SimilarityProvider,
        theta: f64,
        ranges: &[TempRange],
    ) -> Self {
        let ok: Vec<&SweepOutput> = outputs.iter().filter(|o| o.trace.is_some()).collect();
        let texts: Vec<&str> = ok.iter().map(|o| o.text().unwrap_or("")).collect();
        let clusters: Vec<Cluster> = dedupe(&texts, provider, theta)
            .into_iter()
            .map(|c| Cluster {
                members: c.members.iter().map(|&i| ok[i].id).collect(),
                representative: ok[c.representative].id,
            })
            .collect();
        let per_range_stats = ranges
            .iter()
            .map(|r| range_stats_for(r, &outputs, &clusters, provider, theta))
            .collect();
        Self {
            prompt: prompt.to_owned(),
            temperatures: temperatures.to_vec(),
            unique_total: clusters.len(),
            clusters,
            per_range_stats,
            outputs,
            similarity_provider: provider.id(),
            theta,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepOutput> {
        self.outputs.iter().filter(|o| o.error.is_some())
    }

    pub fn outputs_at(&self, temperature: f64) -> impl Iterator<Item = &SweepOutput> {
        self.outputs.iter().filter(move |o| o.temperature == temperature)
    }

    /// Number of clusters touched by outputs at `temperature`.
    pub fn unique_at(&self, temperature: f64) -> usize {
        self.clusters
            .iter()
            .filter(|c| c.members.iter().any(|&m| self.outputs[m].temperature == temperature))
            .count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_range_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.per_range_stats {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One block per cluster: size, temperatures covered and the
    /// representative text.
    pub fn write_digest<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "prompt: {}", self.prompt)?;
        writeln!(out, "unique concepts: {}", self.unique_total)?;
        for (k, c) in self.clusters.iter().enumerate() {
            let mut temps: Vec<f64> = c.members.iter().map(|&m| self.outputs[m].temperature).collect();
            temps.sort_by(f64::total_cmp);
            temps.dedup();
            let temps: Vec<String> = temps.iter().map(|t| format!("{t}")).collect();
            let rep = self.outputs[c.representative].text().unwrap_or("");
            writeln!(out)?;
            writeln!(out, "[{}] {} member(s), T = {}", k + 1, c.members.len(), temps.join(", "))?;
            writeln!(out, "{rep}")?;
        }
        Ok(())
    }

    /// SAC / LC per temperature.
    pub fn metrics_rows(
        &self,
        sim: &dyn SimilarityProvider,
        ppl: &dyn PerplexityProvider,
        theta_dup: f64,
        tau_ppl: f64,
    ) -> Vec<MetricsRow> {
        self.temperatures
            .iter()
            .filter_map(|&t| {
                let texts: Vec<&str> = self.outputs_at(t).filter_map(|o| o.text()).collect();
                MetricsRow::compute(t, &texts, sim, ppl, theta_dup, tau_ppl).ok()
            })
            .collect()
    }
}

/// Statistics for outputs inside one temperature range.
pub fn range_stats(report: &SweepReport, ranges: &[TempRange], provider: &dyn SimilarityProvider) -> Vec<RangeStats> {
    ranges
        .iter()
        .map(|r| range_stats_for(r, &report.outputs, &report.clusters, provider, report.theta))
        .collect()
}

fn range_stats_for(
    range: &TempRange,
    outputs: &[SweepOutput],
    clusters: &[Cluster],
    provider: &dyn SimilarityProvider,
    theta: f64,
) -> RangeStats {
    let inside: Vec<&SweepOutput> = outputs
        .iter()
        .filter(|o| o.trace.is_some() && range.contains(o.temperature))
        .collect();
    let mut stats = RangeStats {
        label: range.label.clone(),
        output_count: inside.len(),
        idea_count: 0,
        duplication_rate: None,
        mean_uts: None,
        steer_count: 0,
        token_count: 0,
        flag: None,
    };
    if inside.is_empty() {
        stats.flag = Some("empty range".into());
        return stats;
    }
    let ids: std::collections::HashSet<usize> = inside.iter().map(|o| o.id).collect();
    stats.idea_count = clusters
        .iter()
        .filter(|c| c.members.iter().any(|m| ids.contains(m)))
        .count();

    if inside.len() < 2 {
        stats.flag = Some("fewer than two outputs; duplication undefined".into());
    } else {
        let texts: Vec<&str> = inside.iter().filter_map(|o| o.text()).collect();
        let n = texts.len();
        let dup: usize = (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).filter(|&j| provider.sim(texts[i], texts[j]) >= theta).count())
            .sum();
        stats.duplication_rate = Some(dup as f64 / (n * (n - 1) / 2) as f64);
    }

    let mut uts_sum = 0.0;
    for o in &inside {
        let t = o.trace.as_ref().expect("filtered");
        stats.steer_count += t.steered_count();
        stats.token_count += t.records.len();
        uts_sum += t.records.iter().map(|r| r.uts).sum::<f64>();
    }
    if stats.token_count > 0 {
        stats.mean_uts = Some(uts_sum / stats.token_count as f64);
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::NgramJaccard;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0.5:3.0:0.25").unwrap().len(), 11);
        let g = parse_grid("0.5:3.0:0.25").unwrap();
        assert!((g[10] - 3.0).abs() < 1e-12);
        assert_eq!(parse_grid("0.5, 0.7,1.0").unwrap(), vec![0.5, 0.7, 1.0]);
        assert_eq!(parse_grid("1.0").unwrap(), vec![1.0]);
        for bad in ["", "1:2", "1:0:0.5", "a,b", "0,1", "1:2:0"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let mut seen = std::collections::HashSet::new();
        for t in 0..11 {
            for s in 0..20 {
                assert!(seen.insert(cell_seed(42, t, s)));
            }
        }
        assert_eq!(cell_seed(42, 3, 4), cell_seed(42, 3, 4));
        assert_ne!(cell_seed(42, 3, 4), cell_seed(43, 3, 4));
    }

    #[test]
    fn dedupe_extremes() {
        let p = NgramJaccard::default();
        assert_eq!(dedupe(&["a b c"; 5], &p, 0.7).len(), 1);
        assert_eq!(dedupe(&["a b", "c d", "e f", "g h"], &p, 0.7).len(), 4);
        assert!(dedupe::<&str>(&[], &p, 0.7).is_empty());
    }

    #[test]
    fn single_link_chains() {
        // a~b and b~c but a!~c still form one component
        let texts = ["w1 w2 w3 w4 w5", "w1 w2 w3 w4 w6", "w1 w2 w3 w7 w6"];
        let p = NgramJaccard { n: 1 };
        assert!(p.sim(texts[0], texts[2]) < 0.7);
        let c = dedupe(&texts, &p, 0.6);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].members, vec![0, 1, 2]);
        assert_eq!(c[0].representative, 1);
    }
}
