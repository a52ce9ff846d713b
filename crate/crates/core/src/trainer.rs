//! The training loop: plain contrastive warmup for `B` epochs, then pseudo-label
//! driven temperatures and negative weights, re-clustering every `F` epochs.
//!
//! Randomness is split into independent streams (see [`crate::rng`]) so the four
//! [`Mode`]s see identical initial weights, batch orders and augmentations, and
//! a run resumed from a checkpoint reproduces the uninterrupted run exactly.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{AugmentConfig, Dataset};
use crate::error::{Result, TaseError};
use crate::model::{sgd_step, LrSchedule, MlpSpec, ModelParams, OptimState};
use crate::objective::{nt_xent, tase_loss, BatchPairing, LossResult};
use crate::pseudo::{self, refresh_pseudo_state, KmeansConfig, PseudoState, TemperatureSchedule};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

/// Which pseudo-label driven components are active after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Plain contrastive loss with `tau_base` throughout.
    Baseline,
    /// Per-sample temperatures, unit negative weights.
    #[serde(rename = "tau")]
    TauOnly,
    /// `tau_base` everywhere, inverse square-root negative weights.
    #[serde(rename = "weight")]
    WeightOnly,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::TauOnly, Mode::WeightOnly, Mode::Full];

    pub fn dynamic_tau(self) -> bool {
        matches!(self, Mode::TauOnly | Mode::Full)
    }

    pub fn dynamic_weights(self) -> bool {
        matches!(self, Mode::WeightOnly | Mode::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::TauOnly => "tau",
            Mode::WeightOnly => "weight",
            Mode::Full => "full",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = TaseError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "tau" | "tau-only" | "tauonly" => Ok(Mode::TauOnly),
            "weight" | "weight-only" | "weightonly" => Ok(Mode::WeightOnly),
            "full" => Ok(Mode::Full),
            other => Err(TaseError::config(format!(
                "unknown mode {other:?} (expected baseline, tau, weight or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `E`.
    pub total_epochs: usize,
    /// Source samples per mini-batch; the last incomplete batch is dropped.
    pub batch_size: usize,
    pub schedule: TemperatureSchedule,
    /// Cluster settings; the seed is replaced by the run seed.
    pub kmeans: KmeansConfig,
    pub mlp: MlpSpec,
    pub peak_lr: f64,
    pub lr_warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub mode: Mode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.kmeans.validate()?;
        self.mlp.validate()?;
        self.augment.validate()?;
        let b = self.schedule.warmup_epochs;
        if b > self.total_epochs {
            return Err(TaseError::config(format!(
                "warmup epochs B={b} exceed total epochs E={}",
                self.total_epochs
            )));
        }
        if self.schedule.horizon > self.total_epochs {
            return Err(TaseError::config(format!(
                "progressive horizon S={} exceeds total epochs E={}",
                self.schedule.horizon, self.total_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(TaseError::config("batch_size must be >= 2"));
        }
        self.lr_schedule().validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TaseError::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TaseError::config("weight_decay must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            total_epochs: self.total_epochs,
            warmup_epochs: self.lr_warmup_epochs,
        }
    }

    fn kmeans_for_run(&self) -> KmeansConfig {
        KmeansConfig {
            seed: self.seed,
            ..self.kmeans
        }
    }
}

/// Summary of one pass over the data.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub batches: usize,
    pub tau_min: f64,
    pub tau_mean: f64,
    pub tau_max: f64,
    pub w_min: f64,
    pub w_mean: f64,
    pub w_max: f64,
    pub mean_positive_sim: f64,
    /// Projector outputs that were exactly zero and had to be perturbed.
    pub degenerate_rows: usize,
}

/// One row of the run history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub stats: EpochStats,
    /// Pseudo labels were recomputed at the end of this epoch.
    pub refreshed: bool,
    pub inertia: Option<f64>,
    pub cluster_sizes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
}

/// When a pseudo state was computed relative to its epoch's training pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RefreshPhase {
    /// Initialization at the start of epoch `B`.
    Start,
    /// Periodic refresh after training epoch `e`.
    End,
}

/// Hooks for persisting progress. All methods default to no-ops.
pub trait RunObserver<T> {
    fn epoch_end(&mut self, _params: &ModelParams<T>, _opt: &OptimState<T>, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn pseudo_refreshed(&mut self, _state: &PseudoState<T>, _phase: RefreshPhase) -> Result<()> {
        Ok(())
    }
}

impl<T> RunObserver<T> for () {}

/// State to continue an interrupted run from.
#[derive(Debug, Clone)]
pub struct Resume<T> {
    pub params: ModelParams<T>,
    pub momentum: crate::model::Gradients<T>,
    pub epochs_completed: usize,
    /// Latest pseudo state computed before `epochs_completed`; required once past warmup.
    pub pseudo: Option<PseudoState<T>>,
}

/// Stack two augmented views of every sample in `ids` into `2 * ids.len()`
/// interleaved rows, drawing from `rng` in sample order.
pub fn make_batch<T: Scalar, R: Rng>(
    features: ArrayView2<T>,
    ids: &[usize],
    augment: &AugmentConfig,
    rng: &mut R,
) -> Array2<T> {
    let d = features.ncols();
    let mut x = Array2::zeros((2 * ids.len(), d));
    let buf = x.as_slice_mut().expect("standard layout");
    for (k, &i) in ids.iter().enumerate() {
        let row = features.row(i);
        augment.augment_into(row, &mut buf[2 * k * d..(2 * k + 1) * d], rng);
        augment.augment_into(row, &mut buf[(2 * k + 1) * d..(2 * k + 2) * d], rng);
    }
    x
}

/// Sample order for `epoch`: a permutation of `0..n` from the data stream,
/// followed by the augmentation draws of that epoch on the same rng.
pub fn epoch_rng(seed: u64, epoch: usize) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed, Stream::Data, epoch as u64)
}

struct Stat {
    min: f64,
    max: f64,
    sum: f64,
    n: usize,
}

impl Stat {
    fn new() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            sum: 0.0,
            n: 0,
        }
    }

    fn push<T: Scalar>(&mut self, xs: &[T]) {
        for &x in xs {
            let x = x.as_f64();
            self.min = self.min.min(x);
            self.max = self.max.max(x);
            self.sum += x;
            self.n += 1;
        }
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.sum / self.n as f64
        }
    }
}

/// One shuffled pass over `features` at `epoch`.
///
/// Before warmup ends, or in [`Mode::Baseline`], batches use the plain loss at
/// `tau_base` and `pseudo` is never consulted. Otherwise the per-anchor
/// temperatures and per-row weights come from `pseudo` according to the mode.
pub fn train_epoch<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut OptimState<T>,
    features: ArrayView2<T>,
    pseudo: Option<&PseudoState<T>>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let n = features.nrows();
    let batch = config.batch_size.min(n);
    if batch == 0 {
        return Err(TaseError::Precondition("training on an empty dataset".into()));
    }
    let sched = &config.schedule;
    let plain = epoch < sched.warmup_epochs || config.mode == Mode::Baseline;
    if !plain && pseudo.is_none() {
        return Err(TaseError::Precondition(format!("epoch {epoch} needs a pseudo state")));
    }
    let lr = T::lit(opt.schedule.lr_at(epoch)?);
    let tau_base = T::lit(sched.tau_base);

    let mut rng = epoch_rng(config.seed, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    let mut pos_sum = 0.0;
    let mut taus = Stat::new();
    let mut ws = Stat::new();
    let mut degenerate = 0;
    let n_batches = n / batch;
    for (b, ids) in order.chunks_exact(batch).enumerate() {
        let x = make_batch(features, ids, &config.augment, &mut rng);
        let (v, cache) = params.forward(x.view())?;
        degenerate += cache.perturbed_rows().len();
        let pairing = BatchPairing::new(ids.len())?;
        let rows: Vec<usize> = (0..pairing.n_rows()).map(|r| ids[pairing.source(r)]).collect();
        let result: LossResult<T> = if plain {
            taus.push(&vec![tau_base; rows.len()]);
            ws.push(&vec![T::one(); rows.len()]);
            nt_xent(v.view(), &pairing, tau_base)?
        } else {
            let state = pseudo.expect("checked above");
            let tau_vec = if config.mode.dynamic_tau() {
                pseudo::temperatures(state, sched, epoch, &rows)?
            } else {
                vec![tau_base; rows.len()]
            };
            let w_vec = if config.mode.dynamic_weights() {
                pseudo::weights(state, &rows)?
            } else {
                vec![T::one(); rows.len()]
            };
            taus.push(&tau_vec);
            ws.push(&w_vec);
            tase_loss(v.view(), &pairing, &tau_vec, &w_vec)?
        };
        if !result.loss.is_finite() || result.grad.iter().any(|g| !g.is_finite()) {
            return Err(TaseError::Diverged {
                epoch,
                batch: b,
                tau_min: taus.min,
                tau_max: taus.max,
                detail: format!("loss = {}", result.loss),
            });
        }
        let grads = params.backprop(&cache, result.grad.view())?;
        sgd_step(params, &grads, opt, lr).map_err(|e| TaseError::Diverged {
            epoch,
            batch: b,
            tau_min: taus.min,
            tau_max: taus.max,
            detail: e.to_string(),
        })?;
        if !params.is_finite() {
            return Err(TaseError::Diverged {
                epoch,
                batch: b,
                tau_min: taus.min,
                tau_max: taus.max,
                detail: "parameters became non-finite".into(),
            });
        }
        loss_sum += result.loss.as_f64();
        pos_sum += result.mean_positive_sim.as_f64();
    }
    let denom = n_batches.max(1) as f64;
    Ok(EpochStats {
        loss: loss_sum / denom,
        batches: n_batches,
        tau_min: taus.min,
        tau_mean: taus.mean(),
        tau_max: taus.max,
        w_min: ws.min,
        w_mean: ws.mean(),
        w_max: ws.max,
        mean_positive_sim: pos_sum / denom,
        degenerate_rows: degenerate,
    })
}

/// Owns the mutable training state of one run.
pub struct Trainer<'a, T> {
    config: TrainConfig,
    features: ArrayView2<'a, T>,
    params: ModelParams<T>,
    opt: OptimState<T>,
    pseudo: Option<PseudoState<T>>,
    next_epoch: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset<T>) -> Result<Self> {
        config.validate()?;
        check_dataset(&config, dataset)?;
        let params = ModelParams::init(config.mlp.clone(), &mut stream_rng(config.seed, Stream::Init, 0))?;
        let opt = OptimState::new(&config.mlp, config.momentum, config.weight_decay, config.lr_schedule())?;
        Ok(Self {
            config,
            features: dataset.features().view(),
            params,
            opt,
            pseudo: None,
            next_epoch: 0,
        })
    }

    pub fn resume(config: TrainConfig, dataset: &'a Dataset<T>, from: Resume<T>) -> Result<Self> {
        config.validate()?;
        check_dataset(&config, dataset)?;
        if from.params.spec() != &config.mlp {
            return Err(TaseError::config("checkpoint architecture differs from the configured one"));
        }
        if from.epochs_completed > config.total_epochs {
            return Err(TaseError::config("checkpoint is past the configured number of epochs"));
        }
        if from.epochs_completed > config.schedule.warmup_epochs && from.pseudo.is_none() {
            return Err(TaseError::Precondition(
                "resuming after warmup requires the latest pseudo state".into(),
            ));
        }
        let mut opt = OptimState::new(&config.mlp, config.momentum, config.weight_decay, config.lr_schedule())?;
        opt.buffers = from.momentum;
        Ok(Self {
            config,
            features: dataset.features().view(),
            params: from.params,
            opt,
            pseudo: from.pseudo,
            next_epoch: from.epochs_completed,
        })
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn pseudo_state(&self) -> Option<&PseudoState<T>> {
        self.pseudo.as_ref()
    }

    fn refresh(&mut self, epoch: usize, phase: RefreshPhase, observer: &mut dyn RunObserver<T>) -> Result<()> {
        let state = refresh_pseudo_state(
            &self.params,
            self.features,
            &self.config.kmeans_for_run(),
            epoch,
            self.config.schedule.warmup_epochs,
        )?;
        observer.pseudo_refreshed(&state, phase)?;
        self.pseudo = Some(state);
        Ok(())
    }

    /// Train the next epoch, including pseudo-label initialization at `B` and
    /// the periodic refresh afterwards.
    pub fn step_epoch(&mut self, observer: &mut dyn RunObserver<T>) -> Result<EpochRecord> {
        let epoch = self.next_epoch;
        if epoch >= self.config.total_epochs {
            return Err(TaseError::Precondition("all epochs already trained".into()));
        }
        let sched = self.config.schedule;
        if epoch == sched.warmup_epochs {
            self.refresh(epoch, RefreshPhase::Start, observer)?;
        }
        let lr = self.opt.schedule.lr_at(epoch)?;
        let pseudo = if epoch >= sched.warmup_epochs { self.pseudo.as_ref() } else { None };
        let stats = train_epoch(&mut self.params, &mut self.opt, self.features, pseudo, &self.config, epoch)?;
        let refreshed = sched.is_refresh_epoch(epoch);
        if refreshed {
            self.refresh(epoch, RefreshPhase::End, observer)?;
        }
        let record = EpochRecord {
            epoch,
            lr,
            stats,
            refreshed,
            inertia: refreshed.then(|| self.pseudo.as_ref().map(|p| p.inertia)).flatten(),
            cluster_sizes: refreshed.then(|| self.pseudo.as_ref().map(|p| p.sizes().to_vec())).flatten(),
        };
        self.next_epoch += 1;
        observer.epoch_end(&self.params, &self.opt, &record)?;
        Ok(record)
    }

    /// Train all remaining epochs.
    pub fn run(mut self, observer: &mut dyn RunObserver<T>) -> Result<(ModelParams<T>, RunHistory)> {
        let start = Instant::now();
        let mut history = RunHistory::default();
        while self.next_epoch < self.config.total_epochs {
            history.records.push(self.step_epoch(observer)?);
        }
        history.wall_clock_secs = start.elapsed().as_secs_f64();
        Ok((self.params, history))
    }

    pub fn into_parts(self) -> (ModelParams<T>, OptimState<T>, Option<PseudoState<T>>) {
        (self.params, self.opt, self.pseudo)
    }
}

fn check_dataset<T: Scalar>(config: &TrainConfig, dataset: &Dataset<T>) -> Result<()> {
    if dataset.is_empty() {
        return Err(TaseError::Precondition("training set is empty".into()));
    }
    if dataset.dim() != config.mlp.input_dim() {
        return Err(TaseError::config(format!(
            "dataset has {} features, model input is {}",
            dataset.dim(),
            config.mlp.input_dim()
        )));
    }
    if config.batch_size > dataset.len() {
        return Err(TaseError::config(format!(
            "batch_size {} exceeds dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    if config.schedule.warmup_epochs < config.total_epochs && config.kmeans.k > dataset.len() {
        return Err(TaseError::config("more clusters than training samples"));
    }
    Ok(())
}

/// Train from scratch for `config.total_epochs` epochs.
pub fn run<T: Scalar>(config: &TrainConfig, dataset: &Dataset<T>) -> Result<(ModelParams<T>, RunHistory)> {
    Trainer::new(config.clone(), dataset)?.run(&mut ())
}
