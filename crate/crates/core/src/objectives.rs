//! Positive-pair augmentation and the training losses.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::rng;

/// Raw-series augmentation: per-channel scaling by a factor drawn from
/// `N(1, scale_std)`, then additive Gaussian jitter with standard deviation
/// `jitter_std` times the channel's standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub jitter: bool,
    pub jitter_std: f64,
    pub scaling: bool,
    pub scale_std: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            jitter: true,
            jitter_std: 0.1,
            scaling: true,
            scale_std: 0.1,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            jitter: false,
            scaling: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("jitter_std", self.jitter_std), ("scale_std", self.scale_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("augment.{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Augments an `[L, d]` series; the result depends only on `x`, the policy
/// and `seed`.
pub fn augment(x: &Tensor<f64>, policy: &AugmentationPolicy, seed: u64) -> Result<Tensor<f64>> {
    policy.validate()?;
    let (len, d) = match *x.shape() {
        [len, d] => (len, d),
        _ => return Err(Error::invalid("augment", format!("expected [L, d], got {:?}", x.shape()))),
    };
    let mut r = rng::stream(seed, &[rng::tag::AUGMENT]);
    let src = x.data();
    let mut out = src.to_vec();
    for c in 0..d {
        let factor = if policy.scaling {
            1.0 + policy.scale_std * r.sample::<f64, _>(StandardNormal)
        } else {
            1.0
        };
        let noise_std = if policy.jitter {
            let mean = (0..len).map(|t| src[t * d + c]).sum::<f64>() / len as f64;
            let var = (0..len).map(|t| (src[t * d + c] - mean).powi(2)).sum::<f64>() / len as f64;
            policy.jitter_std * var.sqrt()
        } else {
            0.0
        };
        for t in 0..len {
            let v = &mut out[t * d + c];
            *v *= factor;
            if policy.jitter {
                *v += noise_std * r.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Tensor::new([len, d], out)
}

/// InfoNCE between the rows of `z` and `z_aug` with cosine similarity.
pub fn info_nce<T: Scalar>(z: &Tensor<T>, z_aug: &Tensor<T>, tau: f64) -> Result<f64> {
    let mut g = Graph::<T>::new();
    let (a, b) = (g.constant(z.clone()), g.constant(z_aug.clone()));
    let loss = g.info_nce(a, b, tau, false)?;
    Ok(g.value(loss).item().f64())
}

/// Mean negative log-probability of `labels` under the row softmax.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::<T>::new();
    let x = g.constant(logits.clone());
    let loss = g.cross_entropy(x, labels)?;
    Ok(g.value(loss).item().f64())
}

/// Which terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Contrastive terms only; labels are never read.
    Pretrain,
    /// `λ·L_CL + L_CE`.
    Finetune,
}

/// Loss settings shared by both stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub stage: Stage,
    pub lambda: f64,
    pub tau: f64,
    pub symmetric: bool,
}

/// Scalar values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cl_t: f64,
    pub l_cl_d: f64,
    pub l_cl_f: f64,
    pub l_cl: f64,
    pub l_ce: f64,
    pub l_total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn per_view(&self) -> [f64; 3] {
        [self.l_cl_t, self.l_cl_d, self.l_cl_f]
    }

    /// Checks the sum and sign invariants.
    pub fn check(&self) -> Result<()> {
        let parts = [self.l_cl_t, self.l_cl_d, self.l_cl_f, self.l_cl, self.l_ce, self.l_total];
        if parts.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("loss report"));
        }
        let slack = 1e-6 * (1.0 + self.l_cl.abs());
        if parts.iter().any(|&v| v < -slack) || (self.l_cl - self.per_view().iter().sum::<f64>()).abs() > slack {
            return Err(Error::invalid("loss report", format!("inconsistent components {self:?}")));
        }
        Ok(())
    }
}

/// Graph handles of a recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cl: [Option<Var>; 3],
    pub ce: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn report<T: Scalar>(&self, g: &Graph<T>, lambda: f64) -> LossReport {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().f64());
        let [t, d, f] = self.cl.map(val);
        LossReport {
            l_cl_t: t,
            l_cl_d: d,
            l_cl_f: f,
            l_cl: t + d + f,
            l_ce: val(self.ce),
            l_total: g.value(self.total).item().f64(),
            lambda,
        }
    }
}

/// Records the objective. Contrastive terms are built only for views present
/// in both `z` and `z_aug`, and only when they carry weight; with `λ = 0` in
/// fine-tuning the total is exactly the cross-entropy.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    z: [Option<Var>; 3],
    z_aug: [Option<Var>; 3],
    logits: Option<Var>,
    labels: Option<&[usize]>,
    spec: LossSpec,
) -> Result<LossVars> {
    if spec.lambda < 0.0 || !spec.lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be nonnegative, got {}", spec.lambda)));
    }
    let want_cl = match spec.stage {
        Stage::Pretrain => true,
        Stage::Finetune => spec.lambda > 0.0,
    };
    let mut cl = [None; 3];
    if want_cl {
        for k in 0..3 {
            if let (Some(a), Some(b)) = (z[k], z_aug[k]) {
                cl[k] = Some(g.info_nce(a, b, spec.tau, spec.symmetric)?);
            }
        }
    }
    let cl_sum = cl.iter().flatten().copied().try_fold(None::<Var>, |acc, v| {
        Ok::<_, Error>(Some(match acc {
            None => v,
            Some(a) => g.add(a, v)?,
        }))
    })?;
    let (ce, total) = match spec.stage {
        Stage::Pretrain => {
            let total = cl_sum.ok_or_else(|| Error::invalid("total_loss", "no contrastive terms to pre-train on"))?;
            (None, total)
        }
        Stage::Finetune => {
            let labels = labels.ok_or_else(|| Error::invalid("total_loss", "fine-tuning needs labels"))?;
            let logits = logits.ok_or_else(|| Error::invalid("total_loss", "fine-tuning needs logits"))?;
            let ce = g.cross_entropy(logits, labels)?;
            let total = match cl_sum {
                Some(s) => {
                    let weighted = g.scale(s, spec.lambda)?;
                    g.add(weighted, ce)?
                }
                None => ce,
            };
            (Some(ce), total)
        }
    };
    Ok(LossVars { cl, ce, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_policy_is_identity() {
        let x = Tensor::from_fn([5, 2], |i| i as f64 * 0.3 - 1.0);
        assert_eq!(augment(&x, &AugmentationPolicy::identity(), 4).unwrap(), x);
    }

    #[test]
    fn augmentation_is_seeded() {
        let x = Tensor::from_fn([16, 1], |i| (i as f64).sin());
        let p = AugmentationPolicy::default();
        assert_eq!(augment(&x, &p, 9).unwrap(), augment(&x, &p, 9).unwrap());
        assert_ne!(augment(&x, &p, 9).unwrap(), augment(&x, &p, 10).unwrap());
    }

    #[test]
    fn closed_form_losses() {
        let same = Tensor::<f64>::ones([4, 3]);
        assert!((info_nce(&same, &same, 0.07).unwrap() - 4f64.ln()).abs() < 1e-12);
        let eye = Tensor::<f64>::identity(4);
        let expect = (1.0 + 3.0 * (-1.0f64 / 0.07).exp()).ln();
        assert!((info_nce(&eye, &eye, 0.07).unwrap() - expect).abs() < 1e-12);
        let logits = Tensor::<f64>::new([1, 2], vec![1.0, 2.0]).unwrap();
        assert!((cross_entropy(&logits, &[0]).unwrap() - 1.313_261_687_518_222_6).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[2]).is_err());
    }

    #[test]
    fn lambda_zero_is_pure_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_fn([3, 2], |i| 1.0 + i as f64));
        let za = g.constant(Tensor::from_fn([3, 2], |i| 2.0 - i as f64 * 0.1));
        let logits = g.constant(Tensor::from_fn([3, 2], |i| i as f64 * 0.2));
        let spec = LossSpec { stage: Stage::Finetune, lambda: 0.0, tau: 0.07, symmetric: false };
        let vars = total_loss(&mut g, [Some(z), None, None], [Some(za), None, None], Some(logits), Some(&[0, 1, 1]), spec).unwrap();
        let r = vars.report(&g, 0.0);
        assert_eq!(r.l_total, r.l_ce);
        assert_eq!(r.l_cl, 0.0);

        let spec = LossSpec { lambda: 0.1, ..spec };
        let vars = total_loss(&mut g, [Some(z), None, None], [Some(za), None, None], Some(logits), Some(&[0, 1, 1]), spec).unwrap();
        let r = vars.report(&g, 0.1);
        assert!((r.l_total - (0.1 * r.l_cl + r.l_ce)).abs() < 1e-12);
        r.check().unwrap();
    }

    #[test]
    fn pretraining_ignores_labels() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_fn([2, 2], |i| 1.0 + i as f64));
        let logits = g.constant(Tensor::zeros([2, 2]));
        let spec = LossSpec { stage: Stage::Pretrain, lambda: 0.1, tau: 0.5, symmetric: false };
        let vars = total_loss(&mut g, [Some(z); 3], [Some(z); 3], Some(logits), None, spec).unwrap();
        let r = vars.report(&g, 0.1);
        assert!(vars.ce.is_none());
        assert!((r.l_total - r.l_cl).abs() < 1e-12);
    }
}
