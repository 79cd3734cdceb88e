//! Gradient-check battery: every differentiable graph op over many seeds,
//! plus the full fine-tuning objective of a tiny model.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::model::{self, Bound, Model, ModelConfig};
use crate::numerics::{gradient_check, CheckReport, Graph, GraphLoss, GraphObjective, Objective, Precision, Scalar, Tensor, Var};
use crate::objectives::{self, AugmentationPolicy, LossSpec, Stage};
use crate::rng;
use crate::views::{self, ViewSet};

/// Per-op bound on the 64-bit relative error.
pub const OP_TOLERANCE: f64 = 1e-5;
/// End-to-end bound in 64-bit mode.
pub const E2E_TOLERANCE_F64: f64 = 1e-5;
/// End-to-end bound when gradients are computed in 32-bit.
pub const E2E_TOLERANCE_F32: f64 = 1e-2;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    MatMul,
    MatMulBroadcast,
    Add,
    AddBias,
    Mul,
    Scale,
    Relu,
    Gelu,
    Softmax,
    SoftmaxInner,
    LayerNorm,
    Attention,
    Mean,
    Sum,
    Reshape,
    Stack,
    Select,
    Concat,
    InfoNce,
    InfoNceSymmetric,
    CrossEntropy,
}

impl Kind {
    const ALL: [Kind; 21] = [
        Kind::MatMul,
        Kind::MatMulBroadcast,
        Kind::Add,
        Kind::AddBias,
        Kind::Mul,
        Kind::Scale,
        Kind::Relu,
        Kind::Gelu,
        Kind::Softmax,
        Kind::SoftmaxInner,
        Kind::LayerNorm,
        Kind::Attention,
        Kind::Mean,
        Kind::Sum,
        Kind::Reshape,
        Kind::Stack,
        Kind::Select,
        Kind::Concat,
        Kind::InfoNce,
        Kind::InfoNceSymmetric,
        Kind::CrossEntropy,
    ];

    fn name(self) -> &'static str {
        match self {
            Kind::MatMul => "matmul",
            Kind::MatMulBroadcast => "matmul_broadcast",
            Kind::Add => "add",
            Kind::AddBias => "add_bias",
            Kind::Mul => "mul",
            Kind::Scale => "scale",
            Kind::Relu => "relu",
            Kind::Gelu => "gelu",
            Kind::Softmax => "softmax",
            Kind::SoftmaxInner => "softmax_inner_axis",
            Kind::LayerNorm => "layer_norm",
            Kind::Attention => "attention",
            Kind::Mean => "mean",
            Kind::Sum => "sum",
            Kind::Reshape => "reshape",
            Kind::Stack => "stack",
            Kind::Select => "select",
            Kind::Concat => "concat",
            Kind::InfoNce => "info_nce",
            Kind::InfoNceSymmetric => "info_nce_symmetric",
            Kind::CrossEntropy => "cross_entropy",
        }
    }

    fn shapes(self) -> Vec<Vec<usize>> {
        match self {
            Kind::MatMul => vec![vec![3, 4], vec![4, 2]],
            Kind::MatMulBroadcast => vec![vec![2, 3, 4], vec![4, 3]],
            Kind::Add | Kind::Mul => vec![vec![2, 3], vec![2, 3]],
            Kind::AddBias => vec![vec![2, 3, 4], vec![4]],
            Kind::Scale | Kind::Relu | Kind::Gelu | Kind::Sum => vec![vec![2, 5]],
            Kind::Softmax => vec![vec![3, 4]],
            Kind::SoftmaxInner | Kind::Mean => vec![vec![2, 3, 4]],
            Kind::LayerNorm => vec![vec![3, 5], vec![5], vec![5]],
            Kind::Attention => vec![vec![2, 3, 4], vec![2, 3, 4], vec![2, 3, 4]],
            Kind::Reshape => vec![vec![2, 6]],
            Kind::Stack | Kind::Concat => vec![vec![2, 3], vec![2, 3]],
            Kind::Select => vec![vec![2, 3, 2]],
            Kind::InfoNce | Kind::InfoNceSymmetric => vec![vec![4, 3], vec![4, 3]],
            Kind::CrossEntropy => vec![vec![4, 3]],
        }
    }

    fn sample(self, seed: u64) -> Vec<Tensor<f64>> {
        let mut r = rng::stream(seed, &[rng::tag::CHECK, self as u64]);
        self.shapes()
            .into_iter()
            .map(|shape| {
                Tensor::from_fn(shape, |_| {
                    let v: f64 = r.sample(StandardNormal);
                    // Keep ReLU inputs off the kink so differences stay one-sided.
                    if self == Kind::Relu && v.abs() < 1e-2 {
                        v.signum() * 0.5
                    } else {
                        v
                    }
                })
            })
            .collect()
    }
}

/// Builds one op on parameter leaves and reduces it to a scalar with a
/// fixed pseudo-random weighting of the output.
struct OpLoss {
    kind: Kind,
    seed: u64,
}

impl OpLoss {
    fn labels(&self) -> Vec<usize> {
        let mut r = rng::stream(self.seed, &[rng::tag::CHECK, 100]);
        (0..4).map(|_| r.gen_range(0..3)).collect()
    }

    fn weighted<T: Scalar>(&self, g: &mut Graph<T>, out: Var) -> Result<Var> {
        let mut r = rng::stream(self.seed, &[rng::tag::CHECK, 200]);
        let w = Tensor::from_fn(g.shape(out).to_vec(), |_| T::of(r.gen_range(-1.0..1.0)));
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        g.sum(prod)
    }
}

impl GraphLoss for OpLoss {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let out = match self.kind {
            Kind::MatMul | Kind::MatMulBroadcast => g.matmul(p[0], p[1])?,
            Kind::Add | Kind::AddBias => g.add(p[0], p[1])?,
            Kind::Mul => g.mul(p[0], p[1])?,
            Kind::Scale => g.scale(p[0], -1.7)?,
            Kind::Relu => g.relu(p[0])?,
            Kind::Gelu => g.gelu(p[0])?,
            Kind::Softmax => g.softmax(p[0], 1)?,
            Kind::SoftmaxInner => g.softmax(p[0], 1)?,
            Kind::LayerNorm => g.layer_norm(p[0], p[1], p[2], model::LAYER_NORM_EPS)?,
            Kind::Attention => g.attention(p[0], p[1], p[2], 2)?,
            Kind::Mean => g.mean(p[0], 1)?,
            Kind::Sum => return g.sum(p[0]),
            Kind::Reshape => g.reshape(p[0], &[3, 2, 2])?,
            Kind::Stack => g.stack(&[p[0], p[1]], 1)?,
            Kind::Select => g.select(p[0], 1, 2)?,
            Kind::Concat => g.concat(&[p[0], p[1]], 1)?,
            Kind::InfoNce => return g.info_nce(p[0], p[1], 0.07, false),
            Kind::InfoNceSymmetric => return g.info_nce(p[0], p[1], 0.07, true),
            Kind::CrossEntropy => return g.cross_entropy(p[0], &self.labels()),
        };
        self.weighted(g, out)
    }
}

/// Wraps an objective and perturbs its analytic gradient, standing in for a
/// broken backward rule.
struct Faulty<O>(O);

impl<O: Objective> Objective for Faulty<O> {
    fn evaluate<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)> {
        let (value, mut grads) = self.0.evaluate(params)?;
        let g = &grads[0];
        let mut data = g.data().to_vec();
        data[0] = data[0] * T::of(1.01) + T::of(1e-3);
        grads[0] = Tensor::new(g.shape().to_vec(), data)?;
        Ok((value, grads))
    }

    fn value<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<T> {
        self.0.value(params)
    }
}

fn check<O: Objective>(obj: O, params: &[Tensor<f64>], mode: Precision, faulty: bool) -> Result<CheckReport> {
    if faulty {
        gradient_check(&Faulty(obj), params, STEP, mode)
    } else {
        gradient_check(&obj, params, STEP, mode)
    }
}

/// Worst result of one battery entry across seeds.
#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub op: String,
    pub shapes: String,
    pub precision: Precision,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for CaseResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<5} {:<20} {:<28} {:?} seeds={:<3} max_rel={:.3e} (seed {}, tol {:.0e})",
            if self.passed() { "ok" } else { "FAIL" },
            self.op,
            self.shapes,
            self.precision,
            self.seeds,
            self.max_rel_error,
            self.worst_seed,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BatteryReport {
    pub cases: Vec<CaseResult>,
}

impl BatteryReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed())
    }
}

/// Names of the ops covered by [`op_battery`].
pub fn op_names() -> Vec<&'static str> {
    Kind::ALL.iter().map(|k| k.name()).collect()
}

fn shape_label(shapes: &[Vec<usize>]) -> String {
    shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" ").replace(", ", "x")
}

/// Checks every op in 64-bit mode over `seeds` random draws. Ops named in
/// `faults` get a corrupted gradient, which the check must flag.
pub fn op_battery(seeds: u64, faults: &[&str]) -> Result<BatteryReport> {
    let mut cases = Vec::new();
    for kind in Kind::ALL {
        let faulty = faults.contains(&kind.name());
        let mut worst = (0.0f64, 0u64);
        for seed in 0..seeds {
            let params = kind.sample(seed);
            let r = check(GraphObjective(OpLoss { kind, seed }), &params, Precision::F64, faulty)?;
            if r.max_rel_error > worst.0 || seed == 0 {
                worst = (r.max_rel_error.max(worst.0), seed);
            }
        }
        cases.push(CaseResult {
            op: kind.name().into(),
            shapes: shape_label(&kind.shapes()),
            precision: Precision::F64,
            seeds: seeds as usize,
            max_rel_error: worst.0,
            worst_seed: worst.1,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(BatteryReport { cases })
}

/// The tiny model of the end-to-end check: L=8, D=4, 2 layers, 2 heads,
/// two classes, all three views with fusion.
pub fn e2e_config() -> ModelConfig {
    ModelConfig {
        length: 8,
        hidden: 4,
        channels: 1,
        classes: 2,
        layers: 2,
        heads: 2,
        ..ModelConfig::default()
    }
}

/// Fine-tuning objective `λ·L_CL + L_CE` on a fixed batch, as a function of
/// every model parameter.
struct ModelLoss {
    config: ModelConfig,
    names: Vec<String>,
    batch: Vec<ViewSet>,
    augmented: Vec<ViewSet>,
    labels: Vec<usize>,
}

impl ModelLoss {
    fn new(seed: u64) -> Result<(Self, Vec<Tensor<f64>>)> {
        let config = e2e_config();
        let model = Model::new(config.clone(), seed)?;
        let mut r = rng::stream(seed, &[rng::tag::CHECK, 300]);
        let mut batch = Vec::new();
        let mut augmented = Vec::new();
        for i in 0..2u64 {
            let x = Tensor::from_fn([config.length, 1], |_| r.sample::<f64, _>(StandardNormal));
            batch.push(views::extract_views(&x, 1.0)?);
            let xa = objectives::augment(&x, &AugmentationPolicy::default(), rng::derive(seed, &[rng::tag::CHECK, i]))?;
            augmented.push(views::extract_views(&xa, 1.0)?);
        }
        let names = model.params().keys().cloned().collect();
        let params = model.params().values().map(|t| t.cast()).collect();
        let loss = Self {
            config,
            names,
            batch,
            augmented,
            labels: vec![0, 1],
        };
        Ok((loss, params))
    }
}

impl GraphLoss for ModelLoss {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> Result<Var> {
        let bound: Bound = self.names.iter().cloned().zip(p.iter().copied()).collect();
        let refs: Vec<&ViewSet> = self.batch.iter().collect();
        let aug: Vec<&ViewSet> = self.augmented.iter().collect();
        let inputs = model::batch_inputs(g, &self.config, &refs)?;
        let out = model::forward(g, &self.config, &bound, inputs)?;
        let aug_inputs = model::batch_inputs(g, &self.config, &aug)?;
        let (_, z_aug) = model::embed(g, &self.config, &bound, aug_inputs)?;
        let spec = LossSpec {
            stage: Stage::Finetune,
            lambda: 0.1,
            tau: 0.07,
            symmetric: false,
        };
        Ok(objectives::total_loss(g, out.z, z_aug, Some(out.logits), Some(&self.labels), spec)?.total)
    }
}

/// Gradient check of the whole model objective with gradients computed at
/// `precision`.
pub fn end_to_end(seed: u64, precision: Precision, fault: bool) -> Result<CaseResult> {
    let (loss, params) = ModelLoss::new(seed)?;
    let c = loss.config.clone();
    let r = check(GraphObjective(loss), &params, precision, fault)?;
    Ok(CaseResult {
        op: "model_loss".into(),
        shapes: format!("N=2 L={} D={} C={} params={}", c.length, c.hidden, c.classes, r.elements),
        precision,
        seeds: 1,
        max_rel_error: r.max_rel_error,
        worst_seed: seed,
        tolerance: match precision {
            Precision::F64 => E2E_TOLERANCE_F64,
            Precision::F32 => E2E_TOLERANCE_F32,
        },
    })
}

/// Op battery over `seeds` seeds followed by the end-to-end checks in both
/// precisions.
pub fn full_battery(seeds: u64, faults: &[&str]) -> Result<BatteryReport> {
    let mut report = op_battery(seeds, faults)?;
    let fault = faults.contains(&"model_loss");
    report.cases.push(end_to_end(0, Precision::F64, fault)?);
    report.cases.push(end_to_end(0, Precision::F32, fault)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_on_a_few_seeds() {
        let report = op_battery(3, &[]).unwrap();
        for c in &report.cases {
            assert!(c.passed(), "{c}");
        }
        assert_eq!(report.cases.len(), op_names().len());
    }

    #[test]
    fn injected_fault_is_reported() {
        let report = op_battery(1, &["gelu"]).unwrap();
        let failed: Vec<_> = report.failures().map(|c| c.op.as_str()).collect();
        assert_eq!(failed, ["gelu"]);
        assert!(report.cases.iter().find(|c| c.op == "gelu").unwrap().to_string().starts_with("FAIL"));
    }
}
