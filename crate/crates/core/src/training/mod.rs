//! Two-stage optimization: contrastive pre-training, then fine-tuning with
//! `λ·L_CL + L_CE`.

pub mod ablation;
mod metrics;
pub mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::dataio::{self, Interpolation, Split, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ViewMask};
use crate::numerics::Tensor;
use crate::objectives::{AugmentationPolicy, LossSpec, Stage};
use crate::rng;
use crate::views::{self, ViewSet};

pub use ablation::{run_ablation_grid, AblationGrid, AblationResults, AblationRow, Aggregate, Setting, Stat};
pub use metrics::{ClassMetrics, MetricsReport};
pub use optim::{Adam, AdamConfig, EarlyStopping, PlateauScheduler};
pub use run::{evaluate, finetune, pretrain, EpochControl, EpochRecord, StepRecord, TrainLog, TrainOutcome};

/// Batch size and epoch budget of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub batch_size: usize,
    pub max_epochs: usize,
}

/// Named bundles of defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Hidden size 128, 3 layers, 4 heads, length 256, 200/100 epochs.
    Full,
    /// A CPU-friendly scale: length 64, hidden 32, 2 layers, short runs.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile '{s}' (expected desk or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: Schedule,
    pub finetune: Schedule,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Two-way InfoNCE instead of the one-directional form.
    pub symmetric: bool,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub min_lr: f64,
    /// Smallest loss decrease that counts as an improvement.
    pub min_delta: f64,
    /// Fine-tune only the classifier.
    pub freeze_encoders: bool,
    pub augment: AugmentationPolicy,
    pub interpolation: Interpolation,
    /// Fraction of observations removed before resampling.
    pub drop_fraction: f64,
    /// Global cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Full)
    }
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let full = Self {
            stage: Stage::Finetune,
            seed: 0,
            model: ModelConfig::default(),
            pretrain: Schedule {
                batch_size: 128,
                max_epochs: 200,
            },
            finetune: Schedule {
                batch_size: 16,
                max_epochs: 100,
            },
            lr: 1e-3,
            weight_decay: 1e-5,
            lambda: 0.1,
            tau: 0.07,
            symmetric: false,
            plateau_factor: 0.1,
            plateau_patience: 10,
            early_stop_patience: 20,
            min_lr: 1e-7,
            min_delta: 1e-6,
            freeze_encoders: false,
            augment: AugmentationPolicy::default(),
            interpolation: Interpolation::NaturalCubic,
            drop_fraction: 0.0,
            max_steps: None,
            eval_batch_size: 256,
        };
        match profile {
            Profile::Full => full,
            Profile::Desk => Self {
                model: ModelConfig {
                    length: 64,
                    hidden: 32,
                    layers: 2,
                    ..ModelConfig::default()
                },
                pretrain: Schedule {
                    batch_size: 64,
                    max_epochs: 20,
                },
                finetune: Schedule {
                    batch_size: 32,
                    max_epochs: 30,
                },
                plateau_patience: 5,
                early_stop_patience: 8,
                ..full
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [("lr", self.lr), ("tau", self.tau), ("min_lr", self.min_lr)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let nonneg = [("weight_decay", self.weight_decay), ("lambda", self.lambda), ("min_delta", self.min_delta)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if self.pretrain.batch_size < 2 {
            return bad("pretrain.batch_size must be at least 2".into());
        }
        if self.finetune.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return bad(format!("drop_fraction must lie in [0, 1), got {}", self.drop_fraction));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when set".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        match self.stage {
            Stage::Pretrain => self.pretrain,
            Stage::Finetune => self.finetune,
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            stage: self.stage,
            lambda: self.lambda,
            tau: self.tau,
            symmetric: self.symmetric,
        }
    }

    pub fn with_views(mut self, views: ViewMask) -> Self {
        self.model.views = views;
        self
    }
}

/// Samples resampled to the model length, z-scored, with their views.
pub struct Prepared {
    series: Vec<Tensor<f64>>,
    views: Vec<ViewSet>,
    labels: Vec<Option<usize>>,
    dt: Vec<f64>,
    splits: Vec<Split>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn views(&self, i: usize) -> &ViewSet {
        &self.views[i]
    }

    pub fn series(&self, i: usize) -> &Tensor<f64> {
        &self.series[i]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    /// Views of sample `i` after augmentation with `seed`.
    pub fn augmented_views(&self, i: usize, policy: &AugmentationPolicy, seed: u64) -> Result<ViewSet> {
        let x = crate::objectives::augment(&self.series[i], policy, seed)?;
        views::extract_views(&x, self.dt[i])
    }
}

/// Time between grid points after resampling `sample` to `len` points:
/// the original span (timestamps in seconds, else steps of `1/freq_hz`,
/// else unit steps) divided by `len − 1`.
pub fn grid_step(sample: &dataio::TimeSeriesSample, freq_hz: Option<f64>, len: usize) -> f64 {
    let span = match sample.timestamps() {
        Some(t) => t[t.len() - 1] - t[0],
        None => (sample.len() - 1) as f64 / freq_hz.unwrap_or(1.0),
    };
    span / (len - 1) as f64
}

/// Drops observations (when configured), resamples, normalizes and extracts
/// views for every sample.
pub fn prepare(dataset: &TimeSeriesDataset, config: &TrainConfig) -> Result<Prepared> {
    if dataset.channels() != config.model.channels {
        return Err(Error::Config(format!(
            "dataset has {} channels but model.channels is {}",
            dataset.channels(),
            config.model.channels
        )));
    }
    let len = config.model.length;
    let mut out = Prepared {
        series: Vec::with_capacity(dataset.len()),
        views: Vec::with_capacity(dataset.len()),
        labels: Vec::with_capacity(dataset.len()),
        dt: Vec::with_capacity(dataset.len()),
        splits: Vec::with_capacity(dataset.len()),
    };
    for (i, sample) in dataset.samples().iter().enumerate() {
        let dt = grid_step(sample, dataset.freq_hz(), len);
        let kept = if config.drop_fraction > 0.0 {
            let seed = rng::derive(config.seed, &[rng::tag::DROP, i as u64]);
            dataio::drop_observations(sample, config.drop_fraction, seed)?
        } else {
            sample.clone()
        };
        let resampled = dataio::resample_uniform(&kept, len, config.interpolation)?;
        let x = dataio::normalize(&resampled).values().clone();
        out.views.push(views::extract_views(&x, dt)?);
        out.series.push(x);
        out.labels.push(sample.label());
        out.dt.push(dt);
        out.splits.push(dataset.split_of(i));
    }
    Ok(out)
}
