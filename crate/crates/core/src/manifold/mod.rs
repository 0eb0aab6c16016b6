//! Truthfulness manifold: per-layer Gaussian model of hidden activations.
//!
//! A manifold is built in three stages:
//!
//! 1. [`RunningStats`] accumulates mean and the sum of outer-product deviations
//!    in a single pass (Welford recurrence), so corpora never need to be held in
//!    memory. Independent accumulators combine with [`RunningStats::merge`].
//! 2. [`RunningStats::finalize`] adds `lambda * I`, factors the covariance as
//!    `L * L^T` and produces an immutable [`LayerManifold`].
//! 3. [`LayerManifold::calibrate_dref`] sets the reference distance from a
//!    held-out split so that `exp(-D / d_ref) >= 0.6` for the 68.27th percentile
//!    of held-out distances.
//!
//! Distances are evaluated with a triangular solve against the stored factor;
//! the precision matrix is never formed.

mod format;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::kernels::dot;

pub use format::{FORMAT_VERSION, MAGIC};

pub const DEFAULT_LAMBDA: f64 = 1e-5;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.1;
/// Fraction of a unit Gaussian within one standard deviation.
pub const CALIBRATION_QUANTILE: f64 = 0.6827;
/// Target manifold confidence at the calibration quantile.
pub const CALIBRATION_CONFIDENCE: f64 = 0.6;

/// One hidden activation vector captured at a given layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSample {
    pub layer_id: u32,
    pub vector: Vec<f64>,
}

impl ActivationSample {
    pub fn new(layer_id: u32, vector: Vec<f64>) -> Self {
        Self { layer_id, vector }
    }
}

#[inline]
fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

/// Streaming first and second moments of a vector-valued sample.
///
/// `m2` is kept as a packed lower triangle, so the full matrix returned by
/// [`RunningStats::m2`] is symmetric by construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    /// Empty accumulator that adopts the dimension of the first sample.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dim(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    /// `None` until a dimension has been fixed.
    pub fn dim(&self) -> Option<usize> {
        if self.mean.is_empty() && self.count == 0 {
            None
        } else {
            Some(self.mean.len())
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Full symmetric `d x d` accumulator, row-major.
    pub fn m2(&self) -> Vec<f64> {
        let d = self.mean.len();
        let mut full = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v = self.m2[tri_index(i, j)];
                full[i * d + j] = v;
                full[j * d + i] = v;
            }
        }
        full
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        check_finite(x)?;
        match self.dim() {
            None => *self = Self::with_dim(x.len()),
            Some(d) => check_dim(d, x.len())?,
        }
        if x.is_empty() {
            return Err(Error::InvalidArgument("zero-length activation".into()));
        }

        self.count += 1;
        let n = self.count as f64;
        let d = x.len();
        let mut delta = Vec::with_capacity(d);
        for (m, &xi) in self.mean.iter_mut().zip(x) {
            let dl = xi - *m;
            *m += dl / n;
            delta.push(dl);
        }
        // (x - mean_old)(x - mean_new)^T == (n-1)/n * delta delta^T
        let c = (n - 1.0) / n;
        for i in 0..d {
            let row = i * (i + 1) / 2;
            let di = delta[i];
            for (m2, &dj) in self.m2[row..=row + i].iter_mut().zip(&delta) {
                *m2 += (di * dj) * c;
            }
        }
        Ok(())
    }

    /// Value-returning form of [`RunningStats::push`].
    pub fn accumulate(mut self, sample: &ActivationSample) -> Result<Self> {
        self.push(&sample.vector)?;
        Ok(self)
    }

    /// Combine two independent accumulators (Chan et al. pairwise update).
    pub fn merge(&mut self, other: &RunningStats) -> Result<()> {
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        check_dim(self.mean.len(), other.mean.len())?;

        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta: Vec<f64> = other
            .mean
            .iter()
            .zip(&self.mean)
            .map(|(b, a)| b - a)
            .collect();
        let w = na * nb / n;
        let d = delta.len();
        for i in 0..d {
            for j in 0..=i {
                let k = tri_index(i, j);
                self.m2[k] += other.m2[k] + (delta[i] * delta[j]) * w;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * (nb / n);
        }
        self.count += other.count;
        Ok(())
    }

    /// Unbiased covariance (n - 1 denominator), row-major.
    pub fn covariance(&self) -> Result<Vec<f64>> {
        if self.count < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                have: self.count,
            });
        }
        let denom = (self.count - 1) as f64;
        Ok(self.m2().into_iter().map(|v| v / denom).collect())
    }

    /// Regularize, factor and freeze. `d_ref` starts at 1.0 until calibrated.
    pub fn finalize(&self, layer_id: u32, lambda: f64) -> Result<LayerManifold> {
        if self.count < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                have: self.count,
            });
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        let d = self.mean.len();
        let denom = (self.count - 1) as f64;
        let mut packed: Vec<f64> = self.m2.iter().map(|v| v / denom).collect();
        for i in 0..d {
            packed[tri_index(i, i)] += lambda;
        }
        let chol_factor = cholesky_packed(&packed, d, lambda)?;
        Ok(LayerManifold {
            layer_id,
            mean: self.mean.clone(),
            chol_factor,
            lambda,
            d_ref: 1.0,
            sample_count: self.count,
        })
    }
}

/// In-place-style Cholesky of a packed lower-triangular SPD matrix.
fn cholesky_packed(a: &[f64], d: usize, lambda: f64) -> Result<Vec<f64>> {
    let mut l = vec![0.0; a.len()];
    for j in 0..d {
        let rj = j * (j + 1) / 2;
        let mut diag = a[rj + j];
        for k in 0..j {
            diag -= l[rj + k] * l[rj + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                suggested_lambda: (lambda - diag).max(lambda * 10.0),
            });
        }
        let ljj = diag.sqrt();
        l[rj + j] = ljj;
        for i in (j + 1)..d {
            let ri = i * (i + 1) / 2;
            let mut s = a[ri + j];
            for k in 0..j {
                s -= l[ri + k] * l[rj + k];
            }
            l[ri + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Frozen per-layer model: mean, Cholesky factor of `Sigma + lambda I`, and
/// reference distance.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerManifold {
    layer_id: u32,
    mean: Vec<f64>,
    chol_factor: Vec<f64>,
    lambda: f64,
    d_ref: f64,
    sample_count: u64,
}

impl LayerManifold {
    /// Assemble from stored parts, checking every invariant.
    pub fn from_parts(
        layer_id: u32,
        mean: Vec<f64>,
        chol_factor: Vec<f64>,
        lambda: f64,
        d_ref: f64,
        sample_count: u64,
    ) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidManifold(format!("layer {layer_id}: zero dimension")));
        }
        if chol_factor.len() != d * (d + 1) / 2 {
            return Err(Error::InvalidManifold(format!(
                "layer {layer_id}: factor has {} entries, expected {}",
                chol_factor.len(),
                d * (d + 1) / 2
            )));
        }
        check_finite(&mean)?;
        check_finite(&chol_factor)?;
        for i in 0..d {
            if !(chol_factor[tri_index(i, i)] > 0.0) {
                return Err(Error::InvalidManifold(format!(
                    "layer {layer_id}: non-positive factor diagonal at {i}"
                )));
            }
        }
        if !(d_ref > 0.0 && d_ref.is_finite()) {
            return Err(Error::InvalidManifold(format!(
                "layer {layer_id}: d_ref must be positive, got {d_ref}"
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidManifold(format!(
                "layer {layer_id}: lambda must be positive, got {lambda}"
            )));
        }
        Ok(Self {
            layer_id,
            mean,
            chol_factor,
            lambda,
            d_ref,
            sample_count,
        })
    }

    pub fn layer_id(&self) -> u32 {
        self.layer_id
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Packed lower triangle, row-major: entry `(i, j)` at `i(i+1)/2 + j`.
    pub fn chol_factor(&self) -> &[f64] {
        &self.chol_factor
    }

    pub fn chol_entry(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.chol_factor[tri_index(i, j)]
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn d_ref(&self) -> f64 {
        self.d_ref
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// `L L^T`, i.e. the regularized covariance, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..=j {
                    s += self.chol_entry(i, k) * self.chol_entry(j, k);
                }
                c[i * d + j] = s;
                c[j * d + i] = s;
            }
        }
        c
    }

    /// Mahalanobis distance of `h` from the manifold mean. O(d^2).
    pub fn mahalanobis(&self, h: &[f64]) -> Result<f64> {
        check_dim(self.dim(), h.len())?;
        check_finite(h)?;
        Ok(self.squared_distance(h).sqrt())
    }

    /// Solves `L y = h - mean`; the squared distance is `|y|^2`.
    fn squared_distance(&self, h: &[f64]) -> f64 {
        let d = self.dim();
        let mut y = vec![0.0; d];
        let mut acc = 0.0;
        for i in 0..d {
            let row = &self.chol_factor[i * (i + 1) / 2..][..=i];
            let s = h[i] - self.mean[i] - dot(&row[..i], &y[..i]);
            let yi = s / row[i];
            y[i] = yi;
            acc += yi * yi;
        }
        acc
    }

    pub fn with_d_ref(mut self, d_ref: f64) -> Result<Self> {
        if !(d_ref > 0.0 && d_ref.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "d_ref must be positive, got {d_ref}"
            )));
        }
        self.d_ref = d_ref;
        Ok(self)
    }

    /// Sets `d_ref = q / ln(1 / 0.6)` where `q` is the 68.27th percentile of
    /// held-out distances.
    pub fn calibrate_dref<'a, I>(&self, held_out: I) -> Result<LayerManifold>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut distances = Vec::new();
        for h in held_out {
            distances.push(self.mahalanobis(h)?);
        }
        if distances.is_empty() {
            return Err(Error::Empty("held-out calibration set"));
        }
        let q = percentile(&mut distances, CALIBRATION_QUANTILE);
        if !(q > 0.0) {
            return Err(Error::Degenerate(format!(
                "layer {}: calibration quantile distance is zero",
                self.layer_id
            )));
        }
        self.clone().with_d_ref(dref_for_quantile(q))
    }
}

/// Reference distance that maps distance `q` onto confidence 0.6.
pub fn dref_for_quantile(q: f64) -> f64 {
    q / (1.0 / CALIBRATION_CONFIDENCE).ln()
}

/// Linear-interpolation percentile (`p` in [0, 1]); sorts `values` in place.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildMetadata {
    pub corpus: String,
    pub build_temperature: f64,
    pub format_version: u32,
}

impl Default for BuildMetadata {
    fn default() -> Self {
        Self {
            corpus: "unspecified".into(),
            build_temperature: 0.1,
            format_version: FORMAT_VERSION,
        }
    }
}

/// Ordered set of layer manifolds. Immutable once built; share freely.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifold {
    layers: Vec<LayerManifold>,
    metadata: BuildMetadata,
}

impl Manifold {
    pub fn new(mut layers: Vec<LayerManifold>, metadata: BuildMetadata) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidManifold("no layers".into()));
        }
        layers.sort_by_key(|l| l.layer_id);
        for w in layers.windows(2) {
            if w[0].layer_id == w[1].layer_id {
                return Err(Error::InvalidManifold(format!(
                    "duplicate layer id {}",
                    w[0].layer_id
                )));
            }
        }
        Ok(Self { layers, metadata })
    }

    pub fn layers(&self) -> &[LayerManifold] {
        &self.layers
    }

    pub fn layer(&self, layer_id: u32) -> Option<&LayerManifold> {
        self.layers
            .binary_search_by_key(&layer_id, |l| l.layer_id)
            .ok()
            .map(|i| &self.layers[i])
    }

    pub fn layer_ids(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.layer_id).collect()
    }

    pub fn metadata(&self) -> &BuildMetadata {
        &self.metadata
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::decode(bytes, BuildMetadata::default())
    }

    /// Writes the binary file and a `<path>.meta.json` sidecar with the build
    /// metadata (the binary layout has no slot for it).
    /// Each file is written to a temporary name and renamed into place, so a
    /// failed save never leaves a partial manifold behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_vec_pretty(&self.metadata)?;
        write_replacing(&sidecar_path(path), &meta)?;
        write_replacing(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let metadata = match std::fs::read(sidecar_path(path)) {
            Ok(raw) => serde_json::from_slice(&raw)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BuildMetadata::default(),
            Err(e) => return Err(e.into()),
        };
        format::decode(&bytes, metadata)
    }
}

fn write_replacing(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    let written = std::fs::write(&tmp, bytes).and_then(|()| std::fs::rename(&tmp, path));
    if written.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(written?)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    s.into()
}

/// Routes per-layer activations into training accumulators and a
/// deterministic held-out split, then finalizes and calibrates every layer.
#[derive(Debug, Clone)]
pub struct ManifoldBuilder {
    lambda: f64,
    holdout_fraction: f64,
    layers: BTreeMap<u32, LayerAccumulator>,
}

#[derive(Debug, Clone, Default)]
struct LayerAccumulator {
    stats: RunningStats,
    held_out: Vec<Vec<f64>>,
    seen: u64,
}

impl ManifoldBuilder {
    pub fn new(lambda: f64, holdout_fraction: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
        }
        if !(0.0..1.0).contains(&holdout_fraction) {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction must be in [0, 1), got {holdout_fraction}"
            )));
        }
        Ok(Self {
            lambda,
            holdout_fraction,
            layers: BTreeMap::new(),
        })
    }

    pub fn push(&mut self, sample: &ActivationSample) -> Result<()> {
        let acc = self.layers.entry(sample.layer_id).or_default();
        // sample k is held out iff floor((k+1) f) > floor(k f): exactly f of the stream
        let k = acc.seen as f64;
        let f = self.holdout_fraction;
        let hold = ((k + 1.0) * f).floor() > (k * f).floor();
        if hold {
            check_finite(&sample.vector)?;
            if let Some(d) = acc.stats.dim() {
                check_dim(d, sample.vector.len())?;
            } else if let Some(first) = acc.held_out.first() {
                check_dim(first.len(), sample.vector.len())?;
            }
            acc.held_out.push(sample.vector.clone());
        } else {
            acc.stats.push(&sample.vector)?;
        }
        acc.seen += 1;
        Ok(())
    }

    pub fn sample_count(&self) -> u64 {
        self.layers.values().map(|a| a.seen).sum()
    }

    /// Vectors routed to the calibration split of `layer_id` so far.
    pub fn held_out(&self, layer_id: u32) -> &[Vec<f64>] {
        self.layers.get(&layer_id).map_or(&[], |a| &a.held_out)
    }

    pub fn build(self, metadata: BuildMetadata) -> Result<Manifold> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (id, acc) in self.layers {
            let lm = acc.stats.finalize(id, self.lambda)?;
            let lm = if acc.held_out.is_empty() {
                lm
            } else {
                lm.calibrate_dref(acc.held_out.iter().map(Vec::as_slice))?
            };
            layers.push(lm);
        }
        if layers.is_empty() {
            return Err(Error::Empty("manifold build corpus"));
        }
        Manifold::new(layers, metadata)
    }
}
