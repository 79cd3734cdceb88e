//! Finite-difference oracle for reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::{Precision, Scalar, Tensor};
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so gradients that vanish do not
/// turn round-off into huge ratios.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// A deterministic scalar function of a list of parameter tensors together
/// with its analytic gradient.
pub trait Objective {
    fn evaluate<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)>;

    fn value<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<T> {
        Ok(self.evaluate(params)?.0)
    }
}

/// Builds a scalar loss on a fresh graph from parameter leaves.
pub trait GraphLoss {
    fn build<T: Scalar>(&self, graph: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

/// Adapts a [`GraphLoss`] into an [`Objective`] differentiated by [`Graph::backward`].
pub struct GraphObjective<L>(pub L);

impl<L: GraphLoss> Objective for GraphObjective<L> {
    fn evaluate<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
        let loss = self.0.build(&mut graph, &vars)?;
        let grads = graph.backward(loss)?;
        let value = graph.value(loss).item();
        Ok((value, vars.iter().map(|&v| grads.get_or_zero(&graph, v)).collect()))
    }

    fn value<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<T> {
        let mut graph = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| graph.constant(p.clone())).collect();
        let loss = self.0.build(&mut graph, &vars)?;
        Ok(graph.value(loss).item())
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, element index) of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub elements: usize,
}

/// Compares reverse-mode gradients, computed at `mode` precision, with
/// central differences `(f(θ+h) − f(θ−h)) / 2h` evaluated in 64-bit.
///
/// The relative error of one element is `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn gradient_check<F: Objective>(
    f: &F,
    params: &[Tensor<f64>],
    step: f64,
    mode: Precision,
) -> Result<CheckReport> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic: Vec<Vec<f64>> = match mode {
        Precision::F64 => analytic_grads::<F, f64>(f, params)?,
        Precision::F32 => analytic_grads::<F, f32>(f, params)?,
    };
    let base = f.value::<f64>(params)?;
    if base.to_bits() != f.value::<f64>(params)?.to_bits() {
        return Err(Error::Oracle("function value changed between identical evaluations".into()));
    }

    let mut report = CheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        elements: 0,
    };
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (p, param) in params.iter().enumerate() {
        for i in 0..param.numel() {
            let original = param.data()[i];
            probe[p] = with_element(param, i, original + step);
            let plus = f.value::<f64>(&probe)?;
            probe[p] = with_element(param, i, original - step);
            let minus = f.value::<f64>(&probe)?;
            probe[p] = param.clone();

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p][i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.elements += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((p, i));
            }
        }
    }
    Ok(report)
}

fn analytic_grads<F: Objective, T: Scalar>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let cast: Vec<Tensor<T>> = params.iter().map(|p| p.cast()).collect();
    let (v1, g1) = f.evaluate(&cast)?;
    let (v2, g2) = f.evaluate(&cast)?;
    if v1.f64().to_bits() != v2.f64().to_bits() || g1 != g2 {
        return Err(Error::Oracle("gradient changed between identical evaluations".into()));
    }
    if g1.len() != params.len() {
        return Err(Error::Oracle(format!("{} gradients for {} parameters", g1.len(), params.len())));
    }
    for (g, p) in g1.iter().zip(params) {
        if g.shape() != p.shape() {
            return Err(Error::shape("gradient_check", p.shape(), g.shape()));
        }
    }
    Ok(g1.iter().map(|g| g.data().iter().map(|v| v.f64()).collect()).collect())
}

fn with_element(t: &Tensor<f64>, index: usize, value: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[index] = value;
    Tensor::from_parts(t.shape().to_vec(), data)
}
