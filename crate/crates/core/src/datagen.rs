//! Synthetic long-tailed datasets and feature-space augmentations.
//!
//! Class sizes follow the exponential (Pareto-style) profile used by the
//! CIFAR-LT benchmarks: `count[c] = floor(n_max * IF^(-c / (C - 1)))`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TaseError};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

/// Shape of a long-tailed class-size profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongTailProfile {
    pub num_classes: usize,
    /// Size of the largest (head) class.
    pub n_max: usize,
    /// Head-class count divided by tail-class count.
    pub imbalance_factor: f64,
}

impl LongTailProfile {
    pub fn new(num_classes: usize, n_max: usize, imbalance_factor: f64) -> Result<Self> {
        let profile = Self {
            num_classes,
            n_max,
            imbalance_factor,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(TaseError::config("long-tail profile needs at least 2 classes"));
        }
        if self.n_max < 1 {
            return Err(TaseError::config("n_max must be at least 1"));
        }
        if !self.imbalance_factor.is_finite() || self.imbalance_factor < 1.0 {
            return Err(TaseError::config(format!(
                "imbalance factor must be a finite value >= 1, got {}",
                self.imbalance_factor
            )));
        }
        if (self.n_max as f64 / self.imbalance_factor).floor() < 1.0 {
            return Err(TaseError::config(format!(
                "tail class is empty: floor({} / {}) = 0",
                self.n_max, self.imbalance_factor
            )));
        }
        Ok(())
    }

    /// Per-class sample counts, largest class first.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let last = (self.num_classes - 1) as f64;
        let counts = (0..self.num_classes)
            .map(|c| {
                let exact = self.n_max as f64 / self.imbalance_factor.powf(c as f64 / last);
                floor_snapped(exact)
            })
            .collect();
        Ok(counts)
    }

    pub fn total(&self) -> Result<usize> {
        Ok(self.class_counts()?.iter().sum())
    }
}

/// `floor`, except values within a few ulps below an integer snap up to it, so
/// that e.g. `4500 / 100^(9/9)` lands on 45 and not 44.
fn floor_snapped(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Free-function form of [`LongTailProfile::class_counts`].
pub fn class_counts(profile: &LongTailProfile) -> Result<Vec<usize>> {
    profile.class_counts()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Head,
    Mid,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Mid, Group::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Group::Head => "head",
            Group::Mid => "mid",
            Group::Tail => "tail",
        }
    }
}

/// How classes are partitioned into head / mid / tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupScheme {
    /// `head` largest classes, then `mid`, then `tail` smallest.
    Ratio { head: usize, mid: usize, tail: usize },
    /// count > hi is head, count < lo is tail, everything else mid.
    Threshold { hi: usize, lo: usize },
}

impl GroupScheme {
    /// Near-even thirds with the remainder going to head: 4:3:3 for 10
    /// classes, 34:33:33 for 100.
    pub fn even_thirds(num_classes: usize) -> Self {
        let third = num_classes / 3;
        GroupScheme::Ratio {
            head: num_classes - 2 * third,
            mid: third,
            tail: third,
        }
    }
}

/// Tag every class as head, mid or tail.
pub fn group_split(class_counts: &[usize], scheme: GroupScheme) -> Result<Vec<Group>> {
    let c = class_counts.len();
    match scheme {
        GroupScheme::Ratio { head, mid, tail } => {
            if head + mid + tail != c {
                return Err(TaseError::config(format!(
                    "group ratio {head}:{mid}:{tail} does not sum to {c} classes"
                )));
            }
            // Largest counts first; equal counts keep class-index order.
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| class_counts[b].cmp(&class_counts[a]).then(a.cmp(&b)));
            let mut groups = vec![Group::Mid; c];
            for (rank, &class) in order.iter().enumerate() {
                groups[class] = if rank < head {
                    Group::Head
                } else if rank < head + mid {
                    Group::Mid
                } else {
                    Group::Tail
                };
            }
            Ok(groups)
        }
        GroupScheme::Threshold { hi, lo } => {
            if hi <= lo {
                return Err(TaseError::config(format!(
                    "threshold scheme needs hi > lo, got hi={hi} lo={lo}"
                )));
            }
            Ok(class_counts
                .iter()
                .map(|&n| {
                    if n > hi {
                        Group::Head
                    } else if n < lo {
                        Group::Tail
                    } else {
                        Group::Mid
                    }
                })
                .collect())
        }
    }
}

/// Feature matrix plus sealed ground-truth labels.
///
/// Training code only ever touches [`Dataset::features`]; labels are exposed
/// through [`Dataset::labels_for_eval`] and used by evaluation and split
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Array2<T>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    groups: Vec<Group>,
}

impl<T: Scalar> Dataset<T> {
    /// Build a dataset, deriving class counts from the labels and groups from
    /// the even-thirds ratio scheme.
    pub fn new(features: Array2<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(TaseError::shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(TaseError::config("dataset needs at least one class"));
        }
        let mut class_counts = vec![0usize; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(TaseError::Format(format!(
                    "label {y} out of range for {num_classes} classes"
                )));
            }
            class_counts[y] += 1;
        }
        if class_counts.windows(2).any(|w| w[0] < w[1]) {
            return Err(TaseError::Format(
                "class counts must be non-increasing by class index".into(),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(TaseError::NonFinite("dataset features".into()));
        }
        let groups = if num_classes >= 3 {
            group_split(&class_counts, GroupScheme::even_thirds(num_classes))?
        } else {
            vec![Group::Head; num_classes]
        };
        Ok(Self {
            features,
            labels,
            class_counts,
            groups,
        })
    }

    pub fn with_groups(mut self, groups: Vec<Group>) -> Result<Self> {
        if groups.len() != self.num_classes() {
            return Err(TaseError::shape(format!(
                "{} group tags for {} classes",
                groups.len(),
                self.num_classes()
            )));
        }
        self.groups = groups;
        Ok(self)
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    /// Ground-truth labels. Evaluation and split construction only.
    pub fn labels_for_eval(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }
}

/// Gaussian class-conditional generator: class means sit on a sphere of
/// radius `class_sep`, samples add isotropic noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    means: Array2<f64>,
    noise: f64,
}

impl SyntheticTask {
    pub fn new(num_classes: usize, d_in: usize, class_sep: f64, noise: f64, seed: u64) -> Result<Self> {
        if d_in < 2 {
            return Err(TaseError::config(format!("d_in must be >= 2, got {d_in}")));
        }
        if !(class_sep > 0.0 && class_sep.is_finite()) {
            return Err(TaseError::config("class_sep must be a positive finite value"));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(TaseError::config("noise must be a non-negative finite value"));
        }
        let mut rng = stream_rng(seed, Stream::Synth, 0);
        let mut means = Array2::<f64>::zeros((num_classes, d_in));
        for mut row in means.rows_mut() {
            loop {
                row.mapv_inplace(|_| rng.sample(StandardNormal));
                let norm = row.dot(&row).sqrt();
                if norm > 1e-8 {
                    row.mapv_inplace(|v| v * class_sep / norm);
                    break;
                }
            }
        }
        Ok(Self { means, noise })
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    /// Draw `counts[c]` samples of class `c`, then shuffle the rows.
    pub fn sample<T: Scalar, R: Rng>(&self, counts: &[usize], rng: &mut R) -> Result<Dataset<T>> {
        if counts.len() != self.means.nrows() {
            return Err(TaseError::shape(format!(
                "{} counts for {} classes",
                counts.len(),
                self.means.nrows()
            )));
        }
        let d = self.means.ncols();
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect();
        labels.shuffle(rng);
        let mut features = Array2::<T>::zeros((labels.len(), d));
        for (mut row, &y) in features.rows_mut().into_iter().zip(&labels) {
            for (dst, &mu) in row.iter_mut().zip(self.means.row(y)) {
                let eps: f64 = rng.sample(StandardNormal);
                *dst = T::lit(mu + self.noise * eps);
            }
        }
        Dataset::new(features, labels, counts.len())
    }
}

/// Long-tailed training set drawn from a seeded [`SyntheticTask`].
pub fn synthesize<T: Scalar>(
    profile: &LongTailProfile,
    d_in: usize,
    class_sep: f64,
    noise: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    let counts = profile.class_counts()?;
    let task = SyntheticTask::new(profile.num_classes, d_in, class_sep, noise, seed)?;
    task.sample(&counts, &mut stream_rng(seed, Stream::Synth, 1))
}

/// Long-tailed training set plus balanced test set and balanced probe pool,
/// all from the same class means. Test and pool inherit the training set's
/// head/mid/tail tags.
#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub pool: Dataset<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn synthesize_splits<T: Scalar>(
    profile: &LongTailProfile,
    d_in: usize,
    class_sep: f64,
    noise: f64,
    test_per_class: usize,
    pool_per_class: usize,
    scheme: GroupScheme,
    seed: u64,
) -> Result<Splits<T>> {
    let counts = profile.class_counts()?;
    let groups = group_split(&counts, scheme)?;
    let task = SyntheticTask::new(profile.num_classes, d_in, class_sep, noise, seed)?;
    let train = task
        .sample(&counts, &mut stream_rng(seed, Stream::Synth, 1))?
        .with_groups(groups.clone())?;
    let test = task
        .sample(
            &vec![test_per_class; profile.num_classes],
            &mut stream_rng(seed, Stream::Synth, 2),
        )?
        .with_groups(groups.clone())?;
    let pool = task
        .sample(
            &vec![pool_per_class; profile.num_classes],
            &mut stream_rng(seed, Stream::Synth, 3),
        )?
        .with_groups(groups)?;
    Ok(Splits { train, test, pool })
}

/// Stochastic feature-space augmentation used to build positive pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Std-dev of additive per-coordinate Gaussian noise.
    pub noise_sigma: f64,
    /// Probability of zeroing each coordinate independently.
    pub mask_prob: f64,
    /// Global scale factor is `1 + u`, `u ~ U(-scale_jitter, scale_jitter)`.
    pub scale_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.3,
            mask_prob: 0.1,
            scale_jitter: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(TaseError::config("augment noise_sigma must be finite and >= 0"));
        }
        if !(self.mask_prob.is_finite() && (0.0..1.0).contains(&self.mask_prob)) {
            return Err(TaseError::config("augment mask_prob must lie in [0, 1)"));
        }
        if !(self.scale_jitter.is_finite() && self.scale_jitter >= 0.0) {
            return Err(TaseError::config("augment scale_jitter must be finite and >= 0"));
        }
        Ok(())
    }

    /// One augmented copy of `x` written into `out`.
    ///
    /// The number of random draws does not depend on the config values, so
    /// runs that differ only in augmentation strength consume the stream
    /// identically.
    pub fn augment_into<T: Scalar, R: Rng>(&self, x: ArrayView1<T>, out: &mut [T], rng: &mut R) {
        debug_assert_eq!(x.len(), out.len());
        let u: f64 = rng.random_range(-1.0..=1.0);
        let scale = T::lit(1.0 + u * self.scale_jitter);
        for (dst, &src) in out.iter_mut().zip(x.iter()) {
            let eps: f64 = rng.sample(StandardNormal);
            let coin: f64 = rng.random();
            *dst = if coin < self.mask_prob {
                T::zero()
            } else {
                (src + T::lit(self.noise_sigma * eps)) * scale
            };
        }
    }
}

/// Two independent augmentations of `x`.
pub fn make_views<T: Scalar, R: Rng>(
    x: ArrayView1<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Array1<T>, Array1<T>)> {
    cfg.validate()?;
    let mut a = Array1::zeros(x.len());
    let mut b = Array1::zeros(x.len());
    cfg.augment_into(x, a.as_slice_mut().expect("contiguous"), rng);
    cfg.augment_into(x, b.as_slice_mut().expect("contiguous"), rng);
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    // Frozen from a 50-digit mpmath evaluation of floor(4500 * 100^(-c/9)).
    const CIFAR10_LT: [usize; 10] = [4500, 2697, 1617, 969, 581, 348, 208, 125, 75, 45];

    #[test]
    fn cifar10_lt_counts_match_oracle() {
        let p = LongTailProfile::new(10, 4500, 100.0).unwrap();
        assert_eq!(p.class_counts().unwrap(), CIFAR10_LT);
        assert_eq!(p.total().unwrap(), 11165);
    }

    #[test]
    fn cifar100_lt_total() {
        let p = LongTailProfile::new(100, 450, 100.0).unwrap();
        let counts = p.class_counts().unwrap();
        assert_eq!(counts[0], 450);
        assert_eq!(counts[99], 4);
        assert_eq!(counts.iter().sum::<usize>(), 9754);
    }

    #[test]
    fn balanced_profile() {
        let p = LongTailProfile::new(5, 100, 1.0).unwrap();
        assert_eq!(p.class_counts().unwrap(), vec![100; 5]);
    }

    #[test]
    fn profile_rejects_bad_inputs() {
        assert!(LongTailProfile::new(1, 10, 2.0).is_err());
        assert!(LongTailProfile::new(3, 10, 0.5).is_err());
        assert!(LongTailProfile::new(3, 10, 11.0).is_err());
        assert!(LongTailProfile::new(3, 0, 1.0).is_err());
    }

    #[test]
    fn ratio_split_cifar10() {
        let g = group_split(&CIFAR10_LT, GroupScheme::Ratio { head: 4, mid: 3, tail: 3 }).unwrap();
        assert!(g[..4].iter().all(|&x| x == Group::Head));
        assert!(g[4..7].iter().all(|&x| x == Group::Mid));
        assert!(g[7..].iter().all(|&x| x == Group::Tail));
        assert_eq!(GroupScheme::even_thirds(10), GroupScheme::Ratio { head: 4, mid: 3, tail: 3 });
        assert_eq!(GroupScheme::even_thirds(100), GroupScheme::Ratio { head: 34, mid: 33, tail: 33 });
    }

    #[test]
    fn threshold_split_imagenet_style() {
        let counts = [1280, 300, 100, 50, 20, 19, 5];
        let g = group_split(&counts, GroupScheme::Threshold { hi: 100, lo: 20 }).unwrap();
        assert_eq!(
            g,
            vec![Group::Head, Group::Head, Group::Mid, Group::Mid, Group::Mid, Group::Tail, Group::Tail]
        );
    }

    #[test]
    fn degenerate_and_malformed_splits() {
        let g = group_split(&[7; 4], GroupScheme::Ratio { head: 4, mid: 0, tail: 0 }).unwrap();
        assert!(g.iter().all(|&x| x == Group::Head));
        assert!(group_split(&[7; 4], GroupScheme::Ratio { head: 2, mid: 1, tail: 0 }).is_err());
        assert!(group_split(&[7; 4], GroupScheme::Threshold { hi: 5, lo: 5 }).is_err());
    }

    #[test]
    fn zero_noise_samples_sit_on_class_means() {
        let p = LongTailProfile::new(2, 10, 1.0).unwrap();
        let ds: Dataset<f64> = synthesize(&p, 4, 3.0, 0.0, 11).unwrap();
        let task = SyntheticTask::new(2, 4, 3.0, 0.0, 11).unwrap();
        for (row, &y) in ds.features().rows().into_iter().zip(ds.labels_for_eval()) {
            assert_eq!(row, task.means().row(y));
        }
        for mean in task.means().rows() {
            assert!((mean.dot(&mean).sqrt() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesize_is_deterministic_and_counts_match() {
        let p = LongTailProfile::new(10, 500, 100.0).unwrap();
        let a: Dataset<f32> = synthesize(&p, 32, 2.0, 0.5, 3).unwrap();
        let b: Dataset<f32> = synthesize(&p, 32, 2.0, 0.5, 3).unwrap();
        assert_eq!(a, b);
        // Independent evaluation of floor(500 * 100^(-c/9)).
        assert_eq!(a.class_counts(), &[500, 299, 179, 107, 64, 38, 23, 13, 8, 5]);
        assert_eq!(a.len(), 1236);
        assert!(synthesize::<f32>(&p, 1, 2.0, 0.5, 3).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let x = array![1.5f32, -2.0, 0.25, 7.0];
        let mut rng = stream_rng(1, Stream::Data, 0);
        let (a, b) = make_views(x.view(), &AugmentConfig::identity(), &mut rng).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn mask_prob_one_rejected() {
        let cfg = AugmentConfig {
            mask_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let x = array![1.0f64, 2.0];
        assert!(make_views(x.view(), &cfg, &mut stream_rng(0, Stream::Data, 0)).is_err());
    }

    #[test]
    fn views_reproducible_for_fixed_seed() {
        let x = array![1.0f64, -1.0, 0.5];
        let cfg = AugmentConfig::default();
        let first = make_views(x.view(), &cfg, &mut stream_rng(9, Stream::Data, 0)).unwrap();
        let second = make_views(x.view(), &cfg, &mut stream_rng(9, Stream::Data, 0)).unwrap();
        assert_eq!(first, second);
        assert_ne!(first.0, first.1);
    }
}
