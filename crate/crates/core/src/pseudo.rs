//! Pseudo-label machinery: k-means cluster allocation over embeddings, the
//! per-sample temperature derived from cluster sizes, and the inverse
//! square-root negative weights.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaseError};
use crate::model::ModelParams;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves more than this (Euclidean).
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k: 10,
            max_iter: 100,
            tol: 1e-6,
            restarts: 3,
            seed: 0,
        }
    }
}

impl KmeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(TaseError::config("k-means needs k >= 1"));
        }
        if self.max_iter == 0 {
            return Err(TaseError::config("k-means needs max_iter >= 1"));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(TaseError::config("k-means tol must be finite and >= 0"));
        }
        if self.restarts == 0 {
            return Err(TaseError::config("k-means needs restarts >= 1"));
        }
        Ok(())
    }
}

/// Cluster allocation `M`, cluster sizes `P` and centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoState<T> {
    assignments: Vec<usize>,
    sizes: Vec<usize>,
    centroids: Array2<T>,
    pub epoch_computed: usize,
    pub inertia: f64,
}

impl<T: Scalar> PseudoState<T> {
    /// Rebuild a state from an allocation, recomputing sizes. Every cluster must be non-empty.
    pub fn from_parts(assignments: Vec<usize>, centroids: Array2<T>, epoch_computed: usize, inertia: f64) -> Result<Self> {
        let k = centroids.nrows();
        let mut sizes = vec![0usize; k];
        for &m in &assignments {
            if m >= k {
                return Err(TaseError::Format(format!("cluster index {m} out of range for k={k}")));
            }
            sizes[m] += 1;
        }
        if sizes.contains(&0) {
            return Err(TaseError::Format("pseudo state has an empty cluster".into()));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(TaseError::NonFinite("centroids".into()));
        }
        Ok(Self {
            assignments,
            sizes,
            centroids,
            epoch_computed,
            inertia,
        })
    }

    /// `M`: cluster index of every training sample.
    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// `P`: number of samples per cluster.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn centroids(&self) -> &Array2<T> {
        &self.centroids
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// `|D_j|`: size of the cluster sample `j` belongs to.
    pub fn cluster_size_of(&self, sample: usize) -> usize {
        self.sizes[self.assignments[sample]]
    }
}

fn sq_dist<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Nearest centroid for every point; ties go to the lower centroid index.
fn assign<T: Scalar>(v: &ArrayView2<T>, centroids: &Array2<T>) -> Vec<(usize, T)> {
    (0..v.nrows())
        .into_par_iter()
        .map(|i| {
            let row = v.row(i);
            let mut best = (0, T::infinity());
            for (c, cen) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(row, cen);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

fn means<T: Scalar>(v: &ArrayView2<T>, labels: &[usize], k: usize) -> (Array2<T>, Vec<usize>) {
    let mut sums = Array2::<T>::zeros((k, v.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &c) in v.rows().into_iter().zip(labels) {
        let mut s = sums.row_mut(c);
        s += &row;
        counts[c] += 1;
    }
    for (mut s, &n) in sums.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            s.mapv_inplace(|x| x / T::from_count(n));
        }
    }
    (sums, counts)
}

fn inertia_of<T: Scalar>(v: &ArrayView2<T>, labels: &[usize], centroids: &Array2<T>) -> f64 {
    v.rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &c)| sq_dist(row, centroids.row(c)).as_f64())
        .sum()
}

fn plus_plus_seed<T: Scalar>(v: &ArrayView2<T>, k: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let n = v.nrows();
    let mut centroids = Array2::<T>::zeros((k, v.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&v.row(first));
    let mut d2: Vec<f64> = v.rows().into_iter().map(|r| sq_dist(r, v.row(first)).as_f64()).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&v.row(pick));
        for (i, row) in v.rows().into_iter().enumerate() {
            let d = sq_dist(row, v.row(pick)).as_f64();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Move the point farthest from its centroid (among clusters with more than one
/// member) into each empty cluster.
fn repair_empty<T: Scalar>(v: &ArrayView2<T>, labels: &mut [usize], dists: &mut [T], centroids: &mut Array2<T>) {
    let k = centroids.nrows();
    let mut counts = vec![0usize; k];
    for &c in labels.iter() {
        counts[c] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..labels.len() {
            if counts[labels[i]] > 1 && far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        counts[labels[i]] -= 1;
        counts[empty] += 1;
        labels[i] = empty;
        dists[i] = T::zero();
        centroids.row_mut(empty).assign(&v.row(i));
    }
}

/// Single-point moves after Lloyd has settled: move `x` from `a` to `b` when
/// `n_b/(n_b+1) |x-m_b|^2 < n_a/(n_a-1) |x-m_a|^2`, which lowers the inertia.
/// Returns whether any point moved.
fn refine<T: Scalar>(v: &ArrayView2<T>, labels: &mut [usize], k: usize, max_passes: usize) -> bool {
    if k < 2 {
        return false;
    }
    let (centroids, mut counts) = means(v, labels, k);
    let mut sums = centroids.mapv(|x| x.as_f64());
    for (mut s, &n) in sums.rows_mut().into_iter().zip(&counts) {
        s *= n as f64;
    }
    let mut moved = false;
    for _ in 0..max_passes {
        let mut changed = false;
        for (i, row) in v.rows().into_iter().enumerate() {
            let a = labels[i];
            if counts[a] < 2 {
                continue;
            }
            let x: Vec<f64> = row.iter().map(|t| t.as_f64()).collect();
            let dist = |c: usize| -> f64 {
                let n_c = counts[c] as f64;
                x.iter().zip(sums.row(c)).map(|(&xi, &s)| (xi - s / n_c).powi(2)).sum()
            };
            let leave = dist(a) * counts[a] as f64 / (counts[a] - 1) as f64;
            let mut best = (a, leave);
            for b in (0..k).filter(|&b| b != a) {
                let join = dist(b) * counts[b] as f64 / (counts[b] + 1) as f64;
                if join < best.1 - 1e-12 * leave.max(1.0) {
                    best = (b, join);
                }
            }
            if best.0 != a {
                let b = best.0;
                for (j, &xi) in x.iter().enumerate() {
                    sums[[a, j]] -= xi;
                    sums[[b, j]] += xi;
                }
                counts[a] -= 1;
                counts[b] += 1;
                labels[i] = b;
                changed = true;
            }
        }
        moved |= changed;
        if !changed {
            break;
        }
    }
    moved
}

/// One restart: seeding plus Lloyd iterations. Returns the final state and the
/// inertia recorded after every update step.
fn lloyd<T: Scalar>(v: &ArrayView2<T>, cfg: &KmeansConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Array2<T>, f64, Vec<f64>) {
    let mut centroids = plus_plus_seed(v, cfg.k, rng);
    let mut labels = vec![0usize; v.nrows()];
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iter {
        let (l, mut d): (Vec<usize>, Vec<T>) = assign(v, &centroids).into_iter().unzip();
        labels = l;
        repair_empty(v, &mut labels, &mut d, &mut centroids);
        let (next, _) = means(v, &labels, cfg.k);
        let shift = next
            .rows()
            .into_iter()
            .zip(centroids.rows())
            .map(|(a, b)| sq_dist(a, b).as_f64().sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        trace.push(inertia_of(v, &labels, &centroids));
        if shift <= cfg.tol {
            break;
        }
    }
    if refine(v, &mut labels, cfg.k, cfg.max_iter) {
        let (next, _) = means(v, &labels, cfg.k);
        centroids = next;
        trace.push(inertia_of(v, &labels, &centroids));
    }
    let inertia = *trace.last().expect("max_iter >= 1");
    (labels, centroids, inertia, trace)
}

/// k-means++ seeding, Lloyd iterations, best of `restarts` by inertia.
pub fn kmeans<T: Scalar>(v: ArrayView2<T>, cfg: &KmeansConfig) -> Result<PseudoState<T>> {
    kmeans_with_rng(v, cfg, &mut stream_rng(cfg.seed, Stream::Kmeans, 0))
}

pub fn kmeans_with_rng<T: Scalar>(v: ArrayView2<T>, cfg: &KmeansConfig, rng: &mut ChaCha8Rng) -> Result<PseudoState<T>> {
    Ok(kmeans_traced(v, cfg, rng)?.0)
}

/// Like [`kmeans_with_rng`], also returning the per-iteration inertia of every restart.
pub fn kmeans_traced<T: Scalar>(
    v: ArrayView2<T>,
    cfg: &KmeansConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PseudoState<T>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if v.nrows() < cfg.k {
        return Err(TaseError::Precondition(format!(
            "k-means with k={} on only {} points",
            cfg.k,
            v.nrows()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(TaseError::NonFinite("k-means input".into()));
    }
    let mut best: Option<(Vec<usize>, Array2<T>, f64)> = None;
    let mut traces = Vec::with_capacity(cfg.restarts);
    for _ in 0..cfg.restarts {
        let (labels, centroids, inertia, trace) = lloyd(&v, cfg, rng);
        traces.push(trace);
        if best.as_ref().is_none_or(|b| inertia < b.2) {
            best = Some((labels, centroids, inertia));
        }
    }
    let (labels, centroids, inertia) = best.expect("restarts >= 1");
    Ok((PseudoState::from_parts(labels, centroids, 0, inertia)?, traces))
}

/// Embed every training sample (no augmentation) and cluster the unit-norm
/// projector outputs. Only valid once warmup is over.
pub fn refresh_pseudo_state<T: Scalar>(
    params: &ModelParams<T>,
    features: ArrayView2<T>,
    cfg: &KmeansConfig,
    epoch: usize,
    warmup_epochs: usize,
) -> Result<PseudoState<T>> {
    if epoch < warmup_epochs {
        return Err(TaseError::Precondition(format!(
            "pseudo labels requested at epoch {epoch}, before warmup ends at {warmup_epochs}"
        )));
    }
    let embedded = embed_in_chunks(params, features)?;
    let mut state = kmeans_with_rng(embedded.view(), cfg, &mut stream_rng(cfg.seed, Stream::Kmeans, epoch as u64))?;
    state.epoch_computed = epoch;
    Ok(state)
}

pub(crate) fn embed_in_chunks<T: Scalar>(params: &ModelParams<T>, x: ArrayView2<T>) -> Result<Array2<T>> {
    let mut out = Array2::zeros((x.nrows(), params.spec().embed_dim()));
    for (src, mut dst) in x.axis_chunks_iter(Axis(0), 1024).zip(out.axis_chunks_iter_mut(Axis(0), 1024)) {
        dst.assign(&params.embed(src)?);
    }
    Ok(out)
}

/// Temperature bounds and the epoch schedule that drives them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    /// Shared temperature used during warmup (and by inactive temperature paths).
    pub tau_base: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// `B`: epochs of plain contrastive warmup before clustering starts.
    pub warmup_epochs: usize,
    /// `S`: epoch by which the head/tail temperature spread is fully open.
    pub horizon: usize,
    /// `F`: pseudo labels are refreshed at epochs divisible by this.
    pub cluster_period: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau_base: 0.2,
            tau_min: 0.1,
            tau_max: 0.6,
            warmup_epochs: 20,
            horizon: 80,
            cluster_period: 10,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_base > 0.0 && self.tau_base.is_finite()) {
            return Err(TaseError::config("tau_base must be positive"));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max && self.tau_max.is_finite()) {
            return Err(TaseError::config("need 0 < tau_min <= tau_max"));
        }
        if self.warmup_epochs > self.horizon {
            return Err(TaseError::config(format!(
                "warmup epochs B={} exceed progressive horizon S={}",
                self.warmup_epochs, self.horizon
            )));
        }
        if self.cluster_period == 0 {
            return Err(TaseError::config("cluster period F must be >= 1"));
        }
        Ok(())
    }

    /// Fraction of the full temperature spread in use at `epoch` (0 at B, 1 from S on).
    pub fn spread_fraction(&self, epoch: usize) -> f64 {
        if self.horizon == self.warmup_epochs {
            return 1.0;
        }
        let done = epoch.saturating_sub(self.warmup_epochs) as f64;
        (done / (self.horizon - self.warmup_epochs) as f64).min(1.0)
    }

    /// Whether `epoch` is a refresh epoch (`e >= B` and `e % F == 0`).
    pub fn is_refresh_epoch(&self, epoch: usize) -> bool {
        epoch >= self.warmup_epochs && epoch.is_multiple_of(self.cluster_period)
    }

    /// Temperature for a sample whose cluster has `size` members, given the
    /// smallest and largest cluster sizes: log-size interpolation around the
    /// midpoint of `[tau_min, tau_max]`, opened up by the progressive factor.
    pub fn tau_for_size(&self, size: usize, smallest: usize, largest: usize, epoch: usize) -> f64 {
        let phi = if largest == smallest {
            0.5
        } else {
            let (lo, hi) = ((smallest as f64).ln(), (largest as f64).ln());
            ((size as f64).ln() - lo) / (hi - lo)
        };
        let center = 0.5 * (self.tau_min + self.tau_max);
        let half = 0.5 * (self.tau_max - self.tau_min) * self.spread_fraction(epoch);
        (center + (2.0 * phi - 1.0) * half).clamp(self.tau_min, self.tau_max)
    }
}

/// Per-sample temperature for `sample_ids` at `epoch`: larger clusters get
/// higher temperatures.
pub fn temperatures<T: Scalar>(
    state: &PseudoState<T>,
    schedule: &TemperatureSchedule,
    epoch: usize,
    sample_ids: &[usize],
) -> Result<Vec<T>> {
    if epoch < schedule.warmup_epochs {
        return Err(TaseError::Precondition(format!(
            "temperatures requested at epoch {epoch}, before warmup ends at {}",
            schedule.warmup_epochs
        )));
    }
    let smallest = *state.sizes.iter().min().expect("k >= 1");
    let largest = *state.sizes.iter().max().expect("k >= 1");
    sample_ids
        .iter()
        .map(|&i| {
            if i >= state.len() {
                return Err(TaseError::shape(format!("sample {i} outside pseudo state of {}", state.len())));
            }
            Ok(T::lit(schedule.tau_for_size(state.cluster_size_of(i), smallest, largest, epoch)))
        })
        .collect()
}

/// `w_j = 1 / sqrt(|D_j|)` for every sample id.
pub fn weights<T: Scalar>(state: &PseudoState<T>, sample_ids: &[usize]) -> Result<Vec<T>> {
    sample_ids
        .iter()
        .map(|&i| {
            if i >= state.len() {
                return Err(TaseError::shape(format!("sample {i} outside pseudo state of {}", state.len())));
            }
            Ok(T::one() / T::from_count(state.cluster_size_of(i)).sqrt())
        })
        .collect()
}
