//! Frozen-embedding evaluation: KNN@1 / KNN@10, the four linear-probe regimes,
//! head / mid / tail group accuracy, and embedding-geometry diagnostics.
//!
//! Accuracies are kept as exact per-class counts; percentages are derived from
//! them, so the overall figure is exactly the count-weighted mean of the
//! per-class figures.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_rational::Ratio;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Group;
use crate::error::{Result, TaseError};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

pub const KNN1: &str = "KNN@1";
pub const KNN10: &str = "KNN@10";
pub const MS_LP: &str = "MS LP";
pub const ONE_PCT_S_LP: &str = "1%S LP";
pub const LT_LP: &str = "LT LP";
pub const FULL_LP: &str = "Full LP";

/// Benchmark names in report order.
pub const BENCHMARKS: [&str; 6] = [KNN1, KNN10, MS_LP, ONE_PCT_S_LP, LT_LP, FULL_LP];

/// Per-class hit counts for one benchmark on the test set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkReport {
    pub name: String,
    pub correct: Vec<u64>,
    pub total: Vec<u64>,
    pub groups: Vec<Group>,
    /// Classes missing from the probe's training subset.
    pub absent_classes: Vec<usize>,
}

impl BenchmarkReport {
    pub fn from_predictions(
        name: &str,
        predictions: &[usize],
        labels: &[usize],
        num_classes: usize,
        groups: &[Group],
    ) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(TaseError::shape("predictions and labels differ in length"));
        }
        if groups.len() != num_classes {
            return Err(TaseError::shape(format!("{} group tags for {num_classes} classes", groups.len())));
        }
        let mut correct = vec![0u64; num_classes];
        let mut total = vec![0u64; num_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            if y >= num_classes {
                return Err(TaseError::shape(format!("label {y} out of range")));
            }
            total[y] += 1;
            if p == y {
                correct[y] += 1;
            }
        }
        Ok(Self {
            name: name.to_string(),
            correct,
            total,
            groups: groups.to_vec(),
            absent_classes: Vec::new(),
        })
    }

    /// Fraction of test points classified correctly, as an exact ratio.
    pub fn overall_exact(&self) -> Ratio<u64> {
        let n: u64 = self.total.iter().sum();
        Ratio::new(self.correct.iter().sum(), n.max(1))
    }

    /// Overall accuracy in percent.
    pub fn overall(&self) -> f64 {
        let r = self.overall_exact();
        100.0 * *r.numer() as f64 / *r.denom() as f64
    }

    /// Per-class accuracy in percent; `None` for classes absent from the test set.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.correct
            .iter()
            .zip(&self.total)
            .map(|(&c, &t)| (t > 0).then(|| 100.0 * c as f64 / t as f64))
            .collect()
    }

    /// Unweighted mean of the per-class accuracies in `group`.
    pub fn group_mean(&self, group: Group) -> Option<f64> {
        let accs: Vec<f64> = self
            .per_class()
            .into_iter()
            .zip(&self.groups)
            .filter_map(|(a, &g)| if g == group { a } else { None })
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Largest minus smallest per-class accuracy.
    pub fn range(&self) -> f64 {
        let accs: Vec<f64> = self.per_class().into_iter().flatten().collect();
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        if accs.is_empty() {
            0.0
        } else {
            max - min
        }
    }

    pub fn summary(&self) -> BenchmarkSummary {
        BenchmarkSummary {
            name: self.name.clone(),
            overall: self.overall(),
            per_class: self.per_class(),
            per_class_correct: self.correct.clone(),
            per_class_total: self.total.clone(),
            head: self.group_mean(Group::Head),
            mid: self.group_mean(Group::Mid),
            tail: self.group_mean(Group::Tail),
            range: self.range(),
            absent_classes: self.absent_classes.clone(),
        }
    }
}

/// Serialized form of one benchmark in `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub name: String,
    pub overall: f64,
    pub per_class: Vec<Option<f64>>,
    pub per_class_correct: Vec<u64>,
    pub per_class_total: Vec<u64>,
    pub head: Option<f64>,
    pub mid: Option<f64>,
    pub tail: Option<f64>,
    pub range: f64,
    pub absent_classes: Vec<usize>,
}

/// Row-wise L2 normalization; all-zero rows stay zero.
pub fn normalize_rows<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > T::zero() {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// The `k` nearest rows of `train` to `query` by Euclidean distance, closest
/// first; equal distances keep the lower training index first.
pub fn nearest<T: Scalar>(train: ArrayView2<T>, query: &[T], k: usize) -> Vec<(usize, T)> {
    let mut d: Vec<(usize, T)> = train
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (i, sq_dist(r.as_slice().expect("standard layout"), query)))
        .collect();
    let cmp = |a: &(usize, T), b: &(usize, T)| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0));
    let k = k.min(d.len());
    if k < d.len() {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(i, s)| (i, s.sqrt())).collect()
}

/// Majority vote; ties go to the class with the smaller summed distance, then
/// to the lower class index.
pub fn vote<T: Scalar>(neighbors: &[(usize, T)], labels: &[usize], num_classes: usize) -> usize {
    let mut votes = vec![0usize; num_classes];
    let mut dist = vec![T::zero(); num_classes];
    for &(i, d) in neighbors {
        votes[labels[i]] += 1;
        dist[labels[i]] += d;
    }
    (0..num_classes)
        .reduce(|best, c| {
            let better = votes[c] > votes[best] || (votes[c] == votes[best] && dist[c] < dist[best]);
            if better {
                c
            } else {
                best
            }
        })
        .expect("num_classes >= 1")
}

/// KNN classification accuracy of `test` against `train` under normalized
/// Euclidean distance.
#[allow(clippy::too_many_arguments)]
pub fn knn_accuracy<T: Scalar>(
    name: &str,
    train: ArrayView2<T>,
    train_labels: &[usize],
    test: ArrayView2<T>,
    test_labels: &[usize],
    k: usize,
    num_classes: usize,
    groups: &[Group],
) -> Result<BenchmarkReport> {
    if train.nrows() == 0 {
        return Err(TaseError::Precondition("KNN needs a non-empty training set".into()));
    }
    if k == 0 || k > train.nrows() {
        return Err(TaseError::Precondition(format!(
            "k={k} invalid for {} training points",
            train.nrows()
        )));
    }
    if train.nrows() != train_labels.len() || test.nrows() != test_labels.len() || train.ncols() != test.ncols() {
        return Err(TaseError::shape("KNN inputs disagree in shape"));
    }
    if let Some(&y) = train_labels.iter().find(|&&y| y >= num_classes) {
        return Err(TaseError::shape(format!("training label {y} out of range")));
    }
    let train = normalize_rows(train);
    let test = normalize_rows(test);
    let predictions: Vec<usize> = (0..test.nrows())
        .into_par_iter()
        .map(|q| {
            let nn = nearest(train.view(), test.row(q).as_slice().expect("standard layout"), k);
            vote(&nn, train_labels, num_classes)
        })
        .collect();
    BenchmarkReport::from_predictions(name, &predictions, test_labels, num_classes, groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProbeRegime {
    /// Whole balanced pool.
    FullLp,
    /// Balanced draw from the long-tailed training set.
    MsLp,
    /// Balanced draw from the balanced pool.
    OnePctSLp,
    /// The long-tailed training set unchanged.
    LtLp,
}

impl ProbeRegime {
    pub fn benchmark_name(self) -> &'static str {
        match self {
            ProbeRegime::FullLp => FULL_LP,
            ProbeRegime::MsLp => MS_LP,
            ProbeRegime::OnePctSLp => ONE_PCT_S_LP,
            ProbeRegime::LtLp => LT_LP,
        }
    }

    fn stream_index(self) -> u64 {
        match self {
            ProbeRegime::FullLp => 0,
            ProbeRegime::MsLp => 1,
            ProbeRegime::OnePctSLp => 2,
            ProbeRegime::LtLp => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub regime: ProbeRegime,
    /// Share of the pool used by the few-shot regimes.
    pub fraction: f64,
    pub iterations: usize,
    pub probe_lr: f64,
    pub seed: u64,
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(TaseError::config("probe fraction must lie in (0, 1]"));
        }
        if !(self.probe_lr > 0.0 && self.probe_lr.is_finite()) {
            return Err(TaseError::config("probe_lr must be positive"));
        }
        Ok(())
    }
}

/// L2 penalty on probe weights.
pub const PROBE_L2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetSource {
    Train,
    Pool,
}

/// Rows selected to fit a probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSubset {
    pub source: SubsetSource,
    /// Ascending row indices into the source set.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Samples per class for the balanced regimes.
    pub per_class: Option<usize>,
    /// Requested per-class count when the tail class could not supply it.
    pub lowered_from: Option<usize>,
}

fn balanced_draw(labels: &[usize], num_classes: usize, per_class: usize, seed: u64, regime: ProbeRegime) -> Vec<usize> {
    let mut rng = stream_rng(seed, Stream::Probe, regime.stream_index());
    let mut picked = Vec::with_capacity(per_class * num_classes);
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        picked.extend(members.into_iter().take(per_class));
    }
    picked.sort_unstable();
    picked
}

/// Choose the probe's training rows for `spec.regime`.
///
/// The few-shot regimes take `max(1, floor(fraction * |pool| / C))` samples per
/// class; MS LP draws them from the long-tailed training set and lowers the
/// count to the smallest class size when needed.
pub fn probe_subset(
    train_labels: &[usize],
    pool_labels: Option<&[usize]>,
    num_classes: usize,
    spec: &ProbeSpec,
) -> Result<ProbeSubset> {
    spec.validate()?;
    let pool_size = pool_labels.map_or(train_labels.len(), <[usize]>::len);
    let per_class = ((spec.fraction * pool_size as f64) / num_classes as f64).floor().max(1.0) as usize;
    let require_pool = || {
        pool_labels.ok_or_else(|| TaseError::Precondition(format!("{} needs a balanced pool", spec.regime.benchmark_name())))
    };
    let take = |labels: &[usize], indices: Vec<usize>| indices.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    Ok(match spec.regime {
        ProbeRegime::LtLp => ProbeSubset {
            source: SubsetSource::Train,
            indices: (0..train_labels.len()).collect(),
            labels: train_labels.to_vec(),
            per_class: None,
            lowered_from: None,
        },
        ProbeRegime::FullLp => {
            let pool = require_pool()?;
            ProbeSubset {
                source: SubsetSource::Pool,
                indices: (0..pool.len()).collect(),
                labels: pool.to_vec(),
                per_class: None,
                lowered_from: None,
            }
        }
        ProbeRegime::MsLp => {
            let mut counts = vec![0usize; num_classes];
            for &y in train_labels {
                counts[y] += 1;
            }
            let available = counts.iter().copied().min().unwrap_or(0);
            let n = per_class.min(available);
            let indices = balanced_draw(train_labels, num_classes, n, spec.seed, spec.regime);
            ProbeSubset {
                source: SubsetSource::Train,
                labels: take(train_labels, indices.clone()),
                indices,
                per_class: Some(n),
                lowered_from: (n < per_class).then_some(per_class),
            }
        }
        ProbeRegime::OnePctSLp => {
            let pool = require_pool()?;
            let indices = balanced_draw(pool, num_classes, per_class, spec.seed, spec.regime);
            ProbeSubset {
                source: SubsetSource::Pool,
                labels: take(pool, indices.clone()),
                indices,
                per_class: Some(per_class),
                lowered_from: None,
            }
        }
    })
}

/// Result of fitting a linear probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub report: BenchmarkReport,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trained multinomial logistic regression.
#[derive(Debug, Clone)]
pub struct LinearProbe<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LinearProbe<T> {
    pub fn logits(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, x: ArrayView2<T>) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (c, &z)| if z > best.1 { (c, z) } else { best })
                    .0
            })
            .collect()
    }

    /// Mean cross entropy plus `PROBE_L2 / 2 * |W|^2`, with the softmax
    /// probabilities it was computed from.
    fn loss_and_probs(&self, x: ArrayView2<T>, y: &[usize]) -> (f64, Array2<T>) {
        let mut p = self.logits(x);
        let mut ce = 0.0;
        for (mut row, &label) in p.rows_mut().into_iter().zip(y) {
            let lse = crate::scalar::log_sum_exp(row.as_slice().expect("standard layout"));
            ce += (lse - row[label]).as_f64();
            row.mapv_inplace(|z| (z - lse).exp());
        }
        let reg = 0.5 * PROBE_L2 * self.weight.iter().map(|w| w.as_f64().powi(2)).sum::<f64>();
        (ce / y.len().max(1) as f64 + reg, p)
    }
}

/// Full-batch gradient descent on softmax cross entropy with a cosine-decayed
/// step size. Starts from zero weights.
pub fn fit_probe<T: Scalar>(
    x: ArrayView2<T>,
    y: &[usize],
    num_classes: usize,
    iterations: usize,
    probe_lr: f64,
) -> Result<(LinearProbe<T>, f64, f64)> {
    if x.nrows() != y.len() {
        return Err(TaseError::shape("probe features and labels differ in length"));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
        return Err(TaseError::shape(format!("probe label {bad} out of range")));
    }
    let mut probe = LinearProbe {
        weight: Array2::zeros((x.ncols(), num_classes)),
        bias: Array1::zeros(num_classes),
    };
    let (initial, _) = probe.loss_and_probs(x, y);
    if y.is_empty() {
        return Ok((probe, initial, initial));
    }
    let inv_n = T::one() / T::from_count(y.len());
    let l2 = T::lit(PROBE_L2);
    for t in 0..iterations {
        let lr = T::lit(probe_lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / iterations as f64).cos()));
        let (_, mut resid) = probe.loss_and_probs(x, y);
        for (mut row, &label) in resid.rows_mut().into_iter().zip(y) {
            row[label] -= T::one();
        }
        resid.mapv_inplace(|v| v * inv_n);
        let gw = x.t().dot(&resid) + &probe.weight.mapv(|w| w * l2);
        let gb = resid.sum_axis(Axis(0));
        probe.weight.scaled_add(-lr, &gw);
        probe.bias.scaled_add(-lr, &gb);
    }
    let (last, _) = probe.loss_and_probs(x, y);
    Ok((probe, initial, last))
}

/// Fit a probe on `(train_x, train_y)` and score it on the test set.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe<T: Scalar>(
    train_x: ArrayView2<T>,
    train_y: &[usize],
    test_x: ArrayView2<T>,
    test_y: &[usize],
    num_classes: usize,
    groups: &[Group],
    spec: &ProbeSpec,
) -> Result<ProbeOutcome> {
    spec.validate()?;
    let (probe, initial_loss, final_loss) = fit_probe(train_x, train_y, num_classes, spec.iterations, spec.probe_lr)?;
    let mut present = vec![false; num_classes];
    for &y in train_y {
        present[y] = true;
    }
    let mut report = BenchmarkReport::from_predictions(
        spec.regime.benchmark_name(),
        &probe.predict(test_x),
        test_y,
        num_classes,
        groups,
    )?;
    report.absent_classes = (0..num_classes).filter(|&c| !present[c]).collect();
    Ok(ProbeOutcome {
        report,
        initial_loss,
        final_loss,
    })
}

/// `log mean_{i != j} exp(-2 |v_i - v_j|^2)` over ordered pairs of distinct rows.
pub fn uniformity<T: Scalar>(v: ArrayView2<T>) -> Result<f64> {
    let n = v.nrows();
    if n < 2 {
        return Err(TaseError::Precondition("uniformity needs at least two rows".into()));
    }
    let mut terms = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d: f64 = v.row(i).iter().zip(v.row(j)).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
                terms.push(-2.0 * d);
            }
        }
    }
    Ok(crate::scalar::log_sum_exp(&terms) - (terms.len() as f64).ln())
}

/// Mean cosine similarity over pairs of distinct same-class rows. Classes with
/// a single sample contribute nothing; `None` when no such pair exists.
pub fn tolerance<T: Scalar>(v: ArrayView2<T>, labels: &[usize]) -> Option<f64> {
    let v = normalize_rows(v);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..v.nrows() {
        for j in (i + 1)..v.nrows() {
            if labels[i] == labels[j] {
                sum += v.row(i).dot(&v.row(j)).as_f64();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Projection of the rows onto their top two principal components.
pub fn pca_2d<T: Scalar>(x: ArrayView2<T>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, 2));
    if n == 0 || d == 0 {
        return out;
    }
    let xf = x.mapv(|v| v.as_f64());
    let mean = xf.mean_axis(Axis(0)).expect("n > 0");
    let centered = &xf - &mean;
    let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(Ordering::Equal));
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // Sign convention: largest-magnitude component positive.
        let pivot = axis.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|a| *a = -*a);
        }
        let axis = Array1::from(axis);
        out.column_mut(slot).assign(&centered.dot(&axis));
    }
    out
}

/// Settings shared by the linear-probe benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub probe_fraction: f64,
    pub probe_iterations: usize,
    pub probe_lr: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_fraction: 0.01,
            probe_iterations: 300,
            probe_lr: 2.0,
            seed: 0,
        }
    }
}

/// Frozen features with labels for the three evaluation sets.
#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a, T> {
    pub train: ArrayView2<'a, T>,
    pub train_labels: &'a [usize],
    pub test: ArrayView2<'a, T>,
    pub test_labels: &'a [usize],
    /// Balanced reservoir for Full LP and 1%S LP.
    pub pool: Option<(ArrayView2<'a, T>, &'a [usize])>,
    pub num_classes: usize,
    pub groups: &'a [Group],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub benchmarks: Vec<BenchmarkReport>,
    pub uniformity: f64,
    pub tolerance: Option<f64>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<&BenchmarkReport> {
        self.benchmarks.iter().find(|b| b.name == name)
    }
}

/// KNN benchmarks only.
pub fn evaluate_knn<T: Scalar>(inputs: &EvalInputs<'_, T>) -> Result<Vec<BenchmarkReport>> {
    [(KNN1, 1), (KNN10, 10)]
        .into_iter()
        .map(|(name, k)| {
            knn_accuracy(
                name,
                inputs.train,
                inputs.train_labels,
                inputs.test,
                inputs.test_labels,
                k,
                inputs.num_classes,
                inputs.groups,
            )
        })
        .collect()
}

/// All six benchmarks plus uniformity / tolerance of the normalized training features.
pub fn evaluate<T: Scalar>(inputs: &EvalInputs<'_, T>, cfg: &EvalConfig) -> Result<EvalReport> {
    let mut notes = Vec::new();
    let mut benchmarks = evaluate_knn(inputs)?;
    let train = normalize_rows(inputs.train);
    let test = normalize_rows(inputs.test);
    let pool = inputs.pool.map(|(x, y)| (normalize_rows(x), y));
    let pool_labels = pool.as_ref().map(|(_, y)| *y);
    for regime in [ProbeRegime::MsLp, ProbeRegime::OnePctSLp, ProbeRegime::LtLp, ProbeRegime::FullLp] {
        let spec = ProbeSpec {
            regime,
            fraction: cfg.probe_fraction,
            iterations: cfg.probe_iterations,
            probe_lr: cfg.probe_lr,
            seed: cfg.seed,
        };
        let subset = probe_subset(inputs.train_labels, pool_labels, inputs.num_classes, &spec)?;
        if let Some(requested) = subset.lowered_from {
            notes.push(format!(
                "{}: per-class count lowered from {requested} to {} by the smallest class",
                regime.benchmark_name(),
                subset.per_class.unwrap_or(0)
            ));
        }
        let source = match subset.source {
            SubsetSource::Train => train.view(),
            SubsetSource::Pool => pool.as_ref().expect("pool regimes checked").0.view(),
        };
        let x = source.select(Axis(0), &subset.indices);
        let outcome = linear_probe(
            x.view(),
            &subset.labels,
            test.view(),
            inputs.test_labels,
            inputs.num_classes,
            inputs.groups,
            &spec,
        )?;
        if !outcome.report.absent_classes.is_empty() {
            notes.push(format!(
                "{}: classes {:?} absent from the probe subset",
                regime.benchmark_name(),
                outcome.report.absent_classes
            ));
        }
        benchmarks.push(outcome.report);
    }
    benchmarks.sort_by_key(|b| BENCHMARKS.iter().position(|&n| n == b.name));
    Ok(EvalReport {
        benchmarks,
        uniformity: uniformity(train.view())?,
        tolerance: tolerance(train.view(), inputs.train_labels),
        notes,
    })
}
