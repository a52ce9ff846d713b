//! Flat experiment configuration read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tase::datagen::{GroupScheme, LongTailProfile};
use tase::{AugmentConfig, EvalConfig, KmeansConfig, MlpSpec, Mode, TemperatureSchedule, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// Encoder output `h`.
    Encoder,
    /// Normalized projector output `v`.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Cifar10lt,
    Cifar100lt,
    Desk,
}

/// Every key of a run. Missing keys take the desk defaults; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // data
    pub num_classes: usize,
    pub n_max: usize,
    pub imbalance_factor: f64,
    pub d_in: usize,
    pub class_sep: f64,
    pub noise: f64,
    pub test_per_class: usize,
    pub pool_per_class: usize,
    /// Class counts per group; all three zero means even thirds.
    pub head_classes: usize,
    pub mid_classes: usize,
    pub tail_classes: usize,
    pub data_seed: u64,

    // model
    pub hidden_dims: Vec<usize>,
    pub proj_dims: Vec<usize>,

    // training
    pub total_epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub cluster_period: usize,
    pub horizon: usize,
    pub k: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub kmeans_restarts: usize,
    pub tau_base: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub peak_lr: f64,
    pub lr_warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub aug_noise_sigma: f64,
    pub aug_mask_prob: f64,
    pub aug_scale_jitter: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Write `checkpoint_NNNN.bin` every this many epochs; 0 disables.
    pub checkpoint_every: usize,

    // evaluation
    pub features: FeatureSource,
    pub probe_fraction: f64,
    pub probe_iterations: usize,
    pub probe_lr: f64,
    /// Seeds used by `sweep` and `ablate`.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            num_classes: 10,
            n_max: 500,
            imbalance_factor: 100.0,
            d_in: 32,
            class_sep: 8.0,
            noise: 1.6,
            test_per_class: 100,
            pool_per_class: 100,
            head_classes: 0,
            mid_classes: 0,
            tail_classes: 0,
            data_seed: 0,
            hidden_dims: vec![128, 128],
            proj_dims: vec![128],
            total_epochs: 200,
            batch_size: 128,
            warmup_epochs: 20,
            cluster_period: 10,
            horizon: 80,
            k: 10,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
            kmeans_restarts: 3,
            tau_base: 0.2,
            tau_min: 0.1,
            tau_max: 0.6,
            peak_lr: 0.5,
            lr_warmup_epochs: 10,
            momentum: 0.9,
            weight_decay: 5e-4,
            aug_noise_sigma: 0.3,
            aug_mask_prob: 0.1,
            aug_scale_jitter: 0.2,
            seed: 0,
            mode: Mode::Full,
            checkpoint_every: 50,
            features: FeatureSource::Encoder,
            probe_fraction: 0.01,
            probe_iterations: 300,
            probe_lr: 2.0,
            seeds: vec![0, 1, 2],
        };
        match p {
            Preset::Desk => desk,
            Preset::Cifar10lt => Self {
                n_max: 4500,
                test_per_class: 1000,
                pool_per_class: 1000,
                total_epochs: 2000,
                warmup_epochs: 50,
                horizon: 500,
                ..desk
            },
            Preset::Cifar100lt => Self {
                num_classes: 100,
                n_max: 450,
                test_per_class: 100,
                pool_per_class: 100,
                total_epochs: 2000,
                warmup_epochs: 50,
                horizon: 500,
                k: 100,
                ..desk
            },
        }
    }

    pub fn from_toml(text: &str, base: Self) -> Result<Self, CliError> {
        // Overlay file keys onto `base`: serialize the base, merge tables, re-parse.
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let mut table = toml::Table::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
        for (k, v) in overlay {
            table.insert(k, v);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self, CliError> {
        let base = preset.map_or_else(Self::default, Self::preset);
        match path {
            None => Ok(base),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text, base)
            }
        }
    }

    /// Fully explicit TOML with the group split resolved.
    pub fn snapshot(&self) -> Result<String, CliError> {
        let mut resolved = self.clone();
        if let GroupScheme::Ratio { head, mid, tail } = resolved.group_scheme() {
            (resolved.head_classes, resolved.mid_classes, resolved.tail_classes) = (head, mid, tail);
        }
        toml::to_string(&resolved).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn profile(&self) -> Result<LongTailProfile, CliError> {
        Ok(LongTailProfile::new(self.num_classes, self.n_max, self.imbalance_factor)?)
    }

    pub fn group_scheme(&self) -> GroupScheme {
        if self.head_classes + self.mid_classes + self.tail_classes == 0 {
            GroupScheme::even_thirds(self.num_classes)
        } else {
            GroupScheme::Ratio {
                head: self.head_classes,
                mid: self.mid_classes,
                tail: self.tail_classes,
            }
        }
    }

    pub fn mlp(&self) -> Result<MlpSpec, CliError> {
        let mut encoder = vec![self.d_in];
        encoder.extend(&self.hidden_dims);
        let mut proj = vec![*encoder.last().expect("non-empty")];
        proj.extend(&self.proj_dims);
        Ok(MlpSpec::new(encoder, proj)?)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            total_epochs: self.total_epochs,
            batch_size: self.batch_size,
            schedule: TemperatureSchedule {
                tau_base: self.tau_base,
                tau_min: self.tau_min,
                tau_max: self.tau_max,
                warmup_epochs: self.warmup_epochs,
                horizon: self.horizon,
                cluster_period: self.cluster_period,
            },
            kmeans: KmeansConfig {
                k: self.k,
                max_iter: self.kmeans_max_iter,
                tol: self.kmeans_tol,
                restarts: self.kmeans_restarts,
                seed: self.seed,
            },
            mlp: self.mlp()?,
            peak_lr: self.peak_lr,
            lr_warmup_epochs: self.lr_warmup_epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            augment: AugmentConfig {
                noise_sigma: self.aug_noise_sigma,
                mask_prob: self.aug_mask_prob,
                scale_jitter: self.aug_scale_jitter,
            },
            seed: self.seed,
            mode: self.mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            probe_fraction: self.probe_fraction,
            probe_iterations: self.probe_iterations,
            probe_lr: self.probe_lr,
            seed: self.seed,
        }
    }

    /// Check everything a run needs before any output is written.
    pub fn validate(&self) -> Result<(), CliError> {
        self.profile()?.validate()?;
        self.train_config()?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_toml("bogus = 1\n", ExperimentConfig::default()).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }

    #[test]
    fn file_keys_overlay_preset() {
        let c = ExperimentConfig::from_toml("k = 5\nmode = \"tau\"\n", ExperimentConfig::preset(Preset::Cifar10lt)).unwrap();
        assert_eq!(c.k, 5);
        assert_eq!(c.mode, Mode::TauOnly);
        assert_eq!(c.n_max, 4500);
    }

    #[test]
    fn snapshot_round_trips_and_is_explicit() {
        let c = ExperimentConfig::default();
        let text = c.snapshot().unwrap();
        assert!(text.contains("head_classes = 4"));
        let back = ExperimentConfig::from_toml(&text, ExperimentConfig::preset(Preset::Cifar100lt)).unwrap();
        assert_eq!(back.n_max, 500);
        assert_eq!((back.head_classes, back.mid_classes, back.tail_classes), (4, 3, 3));
        assert_eq!(back.train_config().unwrap(), c.train_config().unwrap());
    }

    #[test]
    fn presets_validate() {
        for p in [Preset::Desk, Preset::Cifar10lt, Preset::Cifar100lt] {
            ExperimentConfig::preset(p).validate().unwrap();
        }
        assert_eq!(ExperimentConfig::preset(Preset::Cifar10lt).profile().unwrap().total().unwrap(), 11165);
    }
}
