//! Adam, the plateau learning-rate schedule and early stopping.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u32,
}

/// Adam with L2 weight decay folded into the gradient. Moments and step
/// counts are kept per tensor, so a tensor that receives no gradient in a
/// step is left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    state: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: IndexMap::new(),
        }
    }

    /// Applies one update for every tensor named in `grads`. Nothing is
    /// modified if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid("adam", format!("gradient for unknown tensor {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            if !g.data().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("adam gradient"));
            }
        }
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let (b1, b2, wd) = (beta1 as f32, beta2 as f32, weight_decay as f32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let n = p.numel();
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                steps: 0,
            });
            st.steps += 1;
            let c1 = 1.0 - beta1.powi(st.steps as i32);
            let c2 = 1.0 - beta2.powi(st.steps as i32);
            let step = (lr / c1) as f32;
            let c2_sqrt = c2.sqrt() as f32;
            let mut data = std::mem::replace(p, Tensor::scalar(0.0)).into_data();
            for i in 0..n {
                let gi = g.data()[i] + wd * data[i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let denom = st.v[i].sqrt() / c2_sqrt + eps as f32;
                data[i] -= step * st.m[i] / denom;
            }
            *p = Tensor::new(g.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` whenever the monitored loss has
/// not improved by more than `min_delta` for `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    min_delta: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64, min_delta: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            min_delta,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's loss; returns true when the rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.patience {
            return false;
        }
        self.bad_epochs = 0;
        let next = (self.lr * self.factor).max(self.min_lr);
        let reduced = next < self.lr;
        self.lr = next;
        reduced
    }
}

/// Stops after `patience` consecutive epochs without an improvement larger
/// than `min_delta`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records a loss; returns whether it is a new best.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: Vec<f32>) -> ParamSet {
        let n = v.len();
        [(name.to_string(), Tensor::new([n], v).unwrap())].into_iter().collect()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one("w", vec![0.5, -2.0]);
        let g = one("w", vec![1.0, 1.0]);
        Adam::new(AdamConfig::default()).step(&mut p, &g, 1e-3).unwrap();
        assert!((p["w"].data()[0] - 0.499).abs() < 1e-7);
        assert!((p["w"].data()[1] + 2.001).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = one("w", vec![0.5, -2.0]);
        let before = p.clone();
        Adam::new(AdamConfig::default()).step(&mut p, &one("w", vec![0.0, 0.0]), 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected_atomically() {
        let mut p = one("w", vec![1.0]);
        p.insert("u".into(), Tensor::new([1], vec![1.0]).unwrap());
        let mut g = one("u", vec![1.0]);
        g.insert("w".into(), Tensor::from_parts(vec![1], vec![f32::NAN]));
        let before = p.clone();
        assert!(Adam::new(AdamConfig::default()).step(&mut p, &g, 1e-3).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn plateau_cuts_by_factor_and_respects_floor() {
        let mut s = PlateauScheduler::new(1e-6, 0.1, 2, 1e-7, 1e-6);
        s.observe(1.0);
        assert!(!s.observe(1.0));
        assert!(s.observe(1.0));
        assert!((s.lr() - 1e-7).abs() < 1e-20);
        s.observe(1.0);
        assert!(!s.observe(1.0));
        assert_eq!(s.lr(), 1e-7);
    }

    #[test]
    fn early_stopping_counts_stagnant_epochs() {
        let mut e = EarlyStopping::new(3, 1e-6);
        assert!(e.observe(1.0));
        for _ in 0..2 {
            e.observe(1.0 - 1e-7);
            assert!(!e.should_stop());
        }
        e.observe(1.0);
        assert!(e.should_stop());
    }
}
