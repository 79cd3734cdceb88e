//! Interpolation onto uniform grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Cubic spline with zero second derivative at both ends.
    #[default]
    NaturalCubic,
    Linear,
}

/// Natural cubic spline through `(x[i], y[i])`.
#[derive(Clone, Debug)]
pub struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        check_knots(x, y)?;
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for the interior second derivatives, solved
            // with the Thomas algorithm.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let (h0, h1) = (x[i] - x[i - 1], x[i + 1] - x[i]);
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (1..k).rev() {
                m[i] = (rhs[i - 1] - upper[i - 1] * m[i + 1]) / diag[i - 1];
            }
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    /// Value at `t`; outside the knot span the end cubic pieces are extended.
    pub fn eval(&self, t: f64) -> f64 {
        let i = segment(&self.x, t);
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let h = x1 - x0;
        let (a, b) = (x1 - t, t - x0);
        self.m[i] * a * a * a / (6.0 * h)
            + self.m[i + 1] * b * b * b / (6.0 * h)
            + (self.y[i] / h - self.m[i] * h / 6.0) * a
            + (self.y[i + 1] / h - self.m[i + 1] * h / 6.0) * b
    }
}

/// Piecewise-linear interpolation through `(x[i], y[i])`.
pub fn linear_eval(x: &[f64], y: &[f64], t: f64) -> f64 {
    let i = segment(x, t);
    let w = (t - x[i]) / (x[i + 1] - x[i]);
    y[i] * (1.0 - w) + y[i + 1] * w
}

fn segment(x: &[f64], t: f64) -> usize {
    let p = x.partition_point(|&v| v <= t);
    p.clamp(1, x.len() - 1) - 1
}

pub(crate) fn check_knots(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid("interpolate", format!("{} times for {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("interpolate", "needs at least two observations"));
    }
    if let Some(w) = x.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(
            "interpolate",
            format!("timestamps must be strictly increasing (index {} -> {})", w, w + 1),
        ));
    }
    Ok(())
}

/// Evaluates the interpolant of `(x, y)` at each point of `grid`.
pub fn interpolate(x: &[f64], y: &[f64], grid: &[f64], method: Interpolation) -> Result<Vec<f64>> {
    match method {
        Interpolation::NaturalCubic => {
            let s = NaturalSpline::new(x, y)?;
            Ok(grid.iter().map(|&t| s.eval(t)).collect())
        }
        Interpolation::Linear => {
            check_knots(x, y)?;
            Ok(grid.iter().map(|&t| linear_eval(x, y, t)).collect())
        }
    }
}

/// `len` equispaced points from `start` to `end` inclusive.
pub fn uniform_grid(start: f64, end: f64, len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![start];
    }
    let step = (end - start) / (len - 1) as f64;
    (0..len)
        .map(|i| if i == len - 1 { end } else { start + step * i as f64 })
        .collect()
}
