//! Temperature-adaptive, size-weighted contrastive learning on long-tailed data.
//!
//! The crate is generic over the floating-point type through [`Scalar`]; the
//! aliases below fix it to `f32` (the working precision) or `f64`.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod objective;
pub mod pseudo;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use datagen::{
    class_counts, group_split, make_views, synthesize, synthesize_splits, AugmentConfig, Dataset, Group, GroupScheme,
    LongTailProfile, Splits, SyntheticTask,
};
pub use error::{Result, TaseError};
pub use eval::{
    evaluate, knn_accuracy, linear_probe, pca_2d, probe_subset, tolerance, uniformity, BenchmarkReport,
    BenchmarkSummary, EvalConfig, EvalInputs, EvalReport, ProbeRegime, ProbeSpec,
};
pub use model::{lr_at, sgd_step, Gradients, LrSchedule, MlpSpec, ModelParams, OptimState};
pub use objective::{grad_ratio, nt_xent, tase_loss, BatchPairing, LossResult};
pub use pseudo::{kmeans, refresh_pseudo_state, temperatures, weights, KmeansConfig, PseudoState, TemperatureSchedule};
pub use rng::{stream_rng, Stream};
pub use scalar::Scalar;
pub use trainer::{EpochRecord, Mode, RunHistory, RunObserver, TrainConfig, Trainer};

pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Model32 = ModelParams<f32>;
pub type Model64 = ModelParams<f64>;
pub type PseudoState32 = PseudoState<f32>;
pub type PseudoState64 = PseudoState<f64>;
pub type Trainer32<'a> = Trainer<'a, f32>;
