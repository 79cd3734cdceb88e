//! Synthetic source/target datasets built from trend + sinusoid latents.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SplitCounts, TimeSeriesDataset, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// One latent generating process: `slope·t + amplitude·sin(2π·frequency·t/T + φ) + noise`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentClass {
    /// Trend per time step.
    pub slope: f64,
    /// Cycles per window.
    pub frequency: f64,
    pub amplitude: f64,
    pub noise_std: f64,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShiftSpec {
    pub classes: Vec<LatentClass>,
    pub length: usize,
    pub channels: usize,
    pub source: SplitCounts,
    pub target: SplitCounts,
    /// Added to every latent slope in the target domain.
    pub slope_offset: f64,
    /// Added to every latent frequency in the target domain.
    pub frequency_offset: f64,
    pub seed: u64,
}

pub const XOR_LOW_FREQUENCY: f64 = 4.0;
pub const XOR_HIGH_FREQUENCY: f64 = 10.0;

impl SyntheticShiftSpec {
    /// Four latents crossing slope sign with a low/high frequency; the label
    /// is `(slope > 0) XOR (frequency is high)`.
    ///
    /// The amplitude spectrum of `−s·t + a·sin(ωt + φ)` equals that of
    /// `s·t + a·sin(ωt + φ + π)`, so with uniform phases the frequency view
    /// carries no information about the slope sign. The sinusoid sits below
    /// the noise floor in the time domain but concentrates into one bin of the
    /// spectrum.
    pub fn xor(seed: u64) -> Self {
        let (slope, amplitude, noise_std) = (0.03, 0.8, 1.0);
        let latent = |up: bool, high: bool| LatentClass {
            slope: if up { slope } else { -slope },
            frequency: if high { XOR_HIGH_FREQUENCY } else { XOR_LOW_FREQUENCY },
            amplitude,
            noise_std,
            label: usize::from(up ^ high),
        };
        Self {
            classes: vec![
                latent(false, false),
                latent(true, false),
                latent(false, true),
                latent(true, true),
            ],
            length: 64,
            channels: 1,
            source: SplitCounts::new(2000, 500, 500),
            target: SplitCounts::new(60, 20, 500),
            slope_offset: 0.0,
            frequency_offset: 1.0,
            seed,
        }
    }

    /// Two latents told apart by trend direction and dominant frequency
    /// together; a milder task for transfer experiments.
    pub fn shift(seed: u64) -> Self {
        let latent = |label: usize, slope: f64, frequency: f64| LatentClass {
            slope,
            frequency,
            amplitude: 0.6,
            noise_std: 0.8,
            label,
        };
        Self {
            classes: vec![latent(0, -0.01, 4.0), latent(1, 0.01, 9.0)],
            length: 64,
            channels: 1,
            source: SplitCounts::new(2000, 0, 0),
            target: SplitCounts::new(60, 20, 500),
            slope_offset: 0.005,
            frequency_offset: 1.0,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.iter().map(|c| c.label + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.classes.is_empty() {
            return bad("at least one latent class is required".into());
        }
        if self.length < super::MIN_LENGTH {
            return bad(format!("length {} below {}", self.length, super::MIN_LENGTH));
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        let nyquist = self.length as f64 / 2.0;
        for (k, c) in self.classes.iter().enumerate() {
            for (domain, offset) in [("source", 0.0), ("target", self.frequency_offset)] {
                let f = c.frequency + offset;
                if !(f > 0.0 && f < nyquist) {
                    return bad(format!(
                        "latent {k} {domain} frequency {f} outside (0, {nyquist}) cycles per window (aliasing)"
                    ));
                }
            }
            let values = [c.slope, c.amplitude, c.noise_std, self.slope_offset];
            if values.iter().any(|v| !v.is_finite()) || c.amplitude < 0.0 || c.noise_std < 0.0 {
                return bad(format!("latent {k} has invalid amplitude, noise or slope"));
            }
        }
        let labels = self.num_classes();
        for y in 0..labels {
            if !self.classes.iter().any(|c| c.label == y) {
                return bad(format!("no latent produces label {y}"));
            }
        }
        Ok(())
    }
}

const SOURCE: u64 = 0;
const TARGET: u64 = 1;

/// Draws the source and target datasets. Sample `i` of a domain uses latent
/// `i mod K` and its own random stream, so the output is a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticShiftSpec) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    spec.validate()?;
    let source = generate_domain(spec, SOURCE, spec.source, 0.0, 0.0)?;
    let target = generate_domain(spec, TARGET, spec.target, spec.slope_offset, spec.frequency_offset)?;
    Ok((source, target))
}

fn generate_domain(
    spec: &SyntheticShiftSpec,
    domain: u64,
    counts: SplitCounts,
    slope_offset: f64,
    frequency_offset: f64,
) -> Result<TimeSeriesDataset> {
    let (len, d) = (spec.length, spec.channels);
    let mut samples = Vec::with_capacity(counts.total());
    for i in 0..counts.total() {
        let latent = spec.classes[i % spec.classes.len()];
        let slope = latent.slope + slope_offset;
        let omega = 2.0 * PI * (latent.frequency + frequency_offset) / len as f64;
        let mut r = rng::stream(spec.seed, &[rng::tag::SYNTH, domain, i as u64]);
        let phases: Vec<f64> = (0..d).map(|_| r.gen_range(0.0..2.0 * PI)).collect();
        let mut data = Vec::with_capacity(len * d);
        for t in 0..len {
            for &phase in &phases {
                let noise: f64 = r.sample(StandardNormal);
                let tf = t as f64;
                data.push(slope * tf + latent.amplitude * (omega * tf + phase).sin() + latent.noise_std * noise);
            }
        }
        samples.push(TimeSeriesSample::new(Tensor::new([len, d], data)?, None, Some(latent.label))?);
    }
    let name = if domain == SOURCE { "source" } else { "target" };
    let ds = TimeSeriesDataset::new(samples, counts.tags(), Some(spec.num_classes()), None)?
        .with_extra("domain", serde_json::Value::from(name))
        .with_extra("synthetic_spec", serde_json::to_value(spec)?);
    Ok(ds)
}
