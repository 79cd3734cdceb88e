//! Training loops and evaluation.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::optim::{Adam, AdamConfig, EarlyStopping, PlateauScheduler};
use super::{prepare, Prepared, TrainConfig};
use crate::dataio::{Split, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::model::{self, Model, TransferReport};
use crate::numerics::{Graph, Tensor};
use crate::objectives::{total_loss, LossReport, Stage};
use crate::rng;
use crate::views::ViewSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's training batches.
    pub train: LossReport,
    pub val_loss: Option<f64>,
    /// The quantity the scheduler and early stopping watch.
    pub monitored: f64,
    pub lr: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,l_cl_t,l_cl_d,l_cl_f,l_ce,l_total,lr\n");
        for s in &self.steps {
            let l = &s.loss;
            let _ = writeln!(out, "{},{},{},{},{},{},{}", s.step, l.l_cl_t, l.l_cl_d, l.l_cl_f, l.l_ce, l.l_total, s.lr);
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,l_cl,l_ce,l_total,val_loss,monitored,lr,improved\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch, e.train.l_cl, e.train.l_ce, e.train.l_total, val, e.monitored, e.lr, e.improved
            );
        }
        out
    }
}

/// Result of a training run. `model` is the snapshot with the best
/// monitored loss.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub transfer: Option<TransferReport>,
    pub test: Option<MetricsReport>,
}

/// Learning-rate plateau schedule plus early stopping, stepped once per epoch.
#[derive(Clone, Debug)]
pub struct EpochControl {
    scheduler: PlateauScheduler,
    stopping: EarlyStopping,
    max_epochs: usize,
    epochs: usize,
}

/// What to do after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochDecision {
    pub improved: bool,
    pub stop: bool,
    pub early: bool,
}

impl EpochControl {
    pub fn new(config: &TrainConfig, max_epochs: usize) -> Self {
        Self {
            scheduler: PlateauScheduler::new(
                config.lr,
                config.plateau_factor,
                config.plateau_patience,
                config.min_lr,
                config.min_delta,
            ),
            stopping: EarlyStopping::new(config.early_stop_patience, config.min_delta),
            max_epochs,
            epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.scheduler.lr()
    }

    pub fn end_epoch(&mut self, monitored: f64) -> EpochDecision {
        self.epochs += 1;
        let improved = self.stopping.observe(monitored);
        self.scheduler.observe(monitored);
        let early = self.stopping.should_stop();
        EpochDecision {
            improved,
            stop: early || self.epochs >= self.max_epochs,
            early,
        }
    }

    pub fn best(&self) -> f64 {
        self.stopping.best()
    }
}

type Grads = IndexMap<String, Tensor<f32>>;

/// Loss (and, when `trainable` is given, gradients) of one batch. The
/// originals and their augmentations run as one `2N` batch.
fn batch_loss(
    model: &Model,
    data: &Prepared,
    idx: &[usize],
    config: &TrainConfig,
    aug_seed: &dyn Fn(usize) -> u64,
    trainable: Option<&dyn Fn(&str) -> bool>,
) -> Result<(LossReport, Option<Grads>)> {
    let spec = config.loss_spec();
    let n = idx.len();
    let contrastive = match spec.stage {
        Stage::Pretrain => true,
        Stage::Finetune => spec.lambda > 0.0 && n >= 2,
    };
    let labels = match spec.stage {
        Stage::Pretrain => None,
        Stage::Finetune => Some(
            idx.iter()
                .map(|&i| data.label(i).ok_or_else(|| Error::Dataset(format!("sample {i} has no label"))))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let mcfg = model.config();
    let mut g = Graph::<f32>::new();
    let bound = model::bind(&mut g, model.params(), |name| trainable.is_some_and(|f| f(name)));
    let augmented: Vec<ViewSet> = if contrastive {
        idx.iter()
            .map(|&i| data.augmented_views(i, &config.augment, aug_seed(i)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut batch: Vec<&ViewSet> = idx.iter().map(|&i| data.views(i)).collect();
    batch.extend(augmented.iter());
    let inputs = model::batch_inputs(&mut g, mcfg, &batch)?;
    let (_, joint) = model::embed(&mut g, mcfg, &bound, inputs)?;
    let (mut z, mut z_aug) = ([None; 3], [None; 3]);
    for k in 0..3 {
        let Some(v) = joint[k] else { continue };
        if contrastive {
            let halves = g.reshape(v, &[2, n, mcfg.hidden])?;
            z[k] = Some(g.select(halves, 0, 0)?);
            z_aug[k] = Some(g.select(halves, 0, 1)?);
        } else {
            z[k] = Some(v);
        }
    }
    let logits = match spec.stage {
        Stage::Pretrain => None,
        Stage::Finetune => Some(model::classify(&mut g, mcfg, &bound, z)?),
    };
    let vars = total_loss(&mut g, z, z_aug, logits, labels.as_deref(), spec)?;
    let report = vars.report(&g, spec.lambda);
    report.check()?;
    let grads = match trainable {
        None => None,
        Some(_) => {
            let gr = g.backward(vars.total)?;
            let mut out = Grads::new();
            for (name, &var) in bound.iter() {
                if let Some(t) = gr.get(&g, var) {
                    out.insert(name.clone(), t);
                }
            }
            Some(out)
        }
    };
    Ok((report, grads))
}

fn accumulate(sum: &mut LossReport, r: &LossReport, weight: f64) {
    sum.l_cl_t += r.l_cl_t * weight;
    sum.l_cl_d += r.l_cl_d * weight;
    sum.l_cl_f += r.l_cl_f * weight;
    sum.l_cl += r.l_cl * weight;
    sum.l_ce += r.l_ce * weight;
    sum.l_total += r.l_total * weight;
    sum.lambda = r.lambda;
}

fn scaled(r: &LossReport, factor: f64) -> LossReport {
    LossReport {
        l_cl_t: r.l_cl_t * factor,
        l_cl_d: r.l_cl_d * factor,
        l_cl_f: r.l_cl_f * factor,
        l_cl: r.l_cl * factor,
        l_ce: r.l_ce * factor,
        l_total: r.l_total * factor,
        lambda: r.lambda,
    }
}

struct Loop<'a> {
    config: &'a TrainConfig,
    data: &'a Prepared,
    train: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    trainable: &'a dyn Fn(&str) -> bool,
    /// Validation indices; empty means the training loss is monitored.
    val: Vec<usize>,
}

impl Loop<'_> {
    fn run(&self, mut model: Model) -> Result<(Model, TrainLog, usize, f64)> {
        let config = self.config;
        let max_epochs = config.schedule().max_epochs;
        let mut control = EpochControl::new(config, max_epochs);
        let mut adam = Adam::new(AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        });
        let mut log = TrainLog::default();
        let mut best = (model.clone(), 0usize);
        let mut step = 0usize;
        let budget = config.max_steps.unwrap_or(usize::MAX);
        for epoch in 0..max_epochs {
            let mut order = self.train.clone();
            order.shuffle(&mut rng::stream(config.seed, &[rng::tag::SHUFFLE, epoch as u64]));
            let lr = control.lr();
            let mut sum = LossReport::default();
            let mut seen = 0usize;
            for chunk in order.chunks(self.batch_size) {
                if step >= budget || (self.drop_last && chunk.len() < self.batch_size) {
                    break;
                }
                let seed = config.seed;
                let aug_seed = move |i: usize| rng::derive(seed, &[rng::tag::AUGMENT, epoch as u64, i as u64]);
                let (report, grads) = batch_loss(&model, self.data, chunk, config, &aug_seed, Some(self.trainable))?;
                adam.step(model.params_mut(), &grads.expect("gradients requested"), lr)?;
                step += 1;
                log.steps.push(StepRecord { step, epoch, lr, loss: report });
                accumulate(&mut sum, &report, chunk.len() as f64);
                seen += chunk.len();
            }
            if seen == 0 {
                break;
            }
            let train = scaled(&sum, 1.0 / seen as f64);
            let val_loss = if self.val.is_empty() { None } else { Some(self.validation_loss(&model)?) };
            let monitored = val_loss.unwrap_or(train.l_total);
            let decision = control.end_epoch(monitored);
            if decision.improved {
                best = (model.clone(), epoch);
            }
            log.epochs.push(EpochRecord {
                epoch,
                train,
                val_loss,
                monitored,
                lr,
                improved: decision.improved,
            });
            if decision.stop || step >= budget {
                log.stopped_early = decision.early;
                break;
            }
        }
        Ok((best.0, log, best.1, control.best()))
    }

    /// Validation objective with augmentations fixed per sample.
    fn validation_loss(&self, model: &Model) -> Result<f64> {
        let seed = self.config.seed;
        let aug_seed = move |i: usize| rng::derive(seed, &[rng::tag::VAL_AUGMENT, i as u64]);
        let mut total = 0.0;
        for chunk in self.val.chunks(self.config.eval_batch_size) {
            let (r, _) = batch_loss(model, self.data, chunk, self.config, &aug_seed, None)?;
            total += r.l_total * chunk.len() as f64;
        }
        Ok(total / self.val.len() as f64)
    }
}

/// Contrastive pre-training on the train split of `source`. Labels are not
/// read. The returned model is the one with the lowest epoch-mean loss.
pub fn pretrain(model: Model, source: &TimeSeriesDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Pretrain {
        return Err(Error::Config("pretrain requires stage = pretrain".into()));
    }
    let mut model = model;
    model.set_ablation(config.model.views, config.model.fusion);
    let mut cfg = config.clone();
    cfg.model = model.config().clone();
    let data = prepare(source, &cfg)?;
    let train = data.indices(Split::Train);
    if train.len() < cfg.pretrain.batch_size {
        return Err(Error::Dataset(format!(
            "{} training samples cannot fill one batch of {}",
            train.len(),
            cfg.pretrain.batch_size
        )));
    }
    let all = |_: &str| true;
    let lp = Loop {
        config: &cfg,
        data: &data,
        train,
        batch_size: cfg.pretrain.batch_size,
        drop_last: true,
        trainable: &all,
        val: Vec::new(),
    };
    let (model, log, best_epoch, best_loss) = lp.run(model)?;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_loss,
        transfer: None,
        test: None,
    })
}

/// Fine-tunes on the labelled `target`, starting from `init` when given
/// (matching tensors are copied, the classifier is always re-initialized)
/// or from a fresh model. Validation loss drives the schedule; the best
/// validation snapshot is scored once on the test split.
pub fn finetune(init: Option<&Model>, target: &TimeSeriesDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Finetune {
        return Err(Error::Config("finetune requires stage = finetune".into()));
    }
    let classes = target
        .num_classes()
        .ok_or_else(|| Error::Dataset("fine-tuning needs a labelled dataset (meta.json declares no classes)".into()))?;
    let mut mcfg = match init {
        Some(m) => m.config().clone(),
        None => config.model.clone(),
    };
    mcfg.channels = target.channels();
    mcfg.classes = classes;
    mcfg.views = config.model.views;
    mcfg.fusion = config.model.fusion;
    let mut model = Model::new(mcfg.clone(), rng::derive(config.seed, &[rng::tag::INIT]))?;
    let transfer = init.map(|src| {
        let mut report = model.load_matching(src);
        let fresh = model.reinitialize(rng::derive(config.seed, &[rng::tag::INIT, 1]), model::is_classifier);
        report.loaded.retain(|n| !fresh.contains(n));
        for n in fresh {
            if !report.reinitialized.contains(&n) {
                report.reinitialized.push(n);
            }
        }
        report
    });
    let mut cfg = config.clone();
    cfg.model = mcfg;
    let data = prepare(target, &cfg)?;
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Dataset("target has no training samples".into()));
    }
    let freeze = cfg.freeze_encoders;
    let trainable = move |name: &str| !freeze || model::is_classifier(name);
    let lp = Loop {
        config: &cfg,
        data: &data,
        train,
        batch_size: cfg.finetune.batch_size,
        drop_last: false,
        trainable: &trainable,
        val: data.indices(Split::Val),
    };
    let (model, log, best_epoch, best_loss) = lp.run(model)?;
    let test_idx = data.indices(Split::Test);
    let test = if test_idx.is_empty() {
        None
    } else {
        Some(score(&model, &data, &test_idx, cfg.eval_batch_size)?)
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_loss,
        transfer,
        test,
    })
}

fn score(model: &Model, data: &Prepared, idx: &[usize], batch: usize) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(idx.len());
    let mut truth = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch) {
        let sets: Vec<&ViewSet> = chunk.iter().map(|&i| data.views(i)).collect();
        preds.extend(model.infer(&sets)?.predictions());
        for &i in chunk {
            truth.push(data.label(i).ok_or_else(|| Error::Dataset(format!("sample {i} has no label")))?);
        }
    }
    MetricsReport::from_predictions(&preds, &truth, model.config().classes)
}

/// Scores `model` on one labelled split.
pub fn evaluate(model: &Model, dataset: &TimeSeriesDataset, split: Split, config: &TrainConfig) -> Result<MetricsReport> {
    let mut cfg = config.clone();
    cfg.model = model.config().clone();
    let data = prepare(dataset, &cfg)?;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Dataset(format!("split '{}' is empty", split.name())));
    }
    score(model, &data, &idx, cfg.eval_batch_size)
}
