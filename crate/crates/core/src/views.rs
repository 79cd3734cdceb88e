//! The temporal, derivative and frequency views of a series.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Encoder inputs for one sample, each `[L, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub temporal: Tensor<f64>,
    pub derivative: Tensor<f64>,
    pub frequency: Tensor<f64>,
}

/// The three views in a fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Temporal,
    Derivative,
    Frequency,
}

impl View {
    pub const ALL: [View; 3] = [View::Temporal, View::Derivative, View::Frequency];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> char {
        match self {
            View::Temporal => 't',
            View::Derivative => 'd',
            View::Frequency => 'f',
        }
    }

    pub fn from_tag(c: char) -> Option<Self> {
        View::ALL.into_iter().find(|v| v.tag() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Temporal => "temporal",
            View::Derivative => "derivative",
            View::Frequency => "frequency",
        }
    }
}

impl ViewSet {
    pub fn get(&self, view: View) -> &Tensor<f64> {
        match view {
            View::Temporal => &self.temporal,
            View::Derivative => &self.derivative,
            View::Frequency => &self.frequency,
        }
    }
}

fn columns(x: &Tensor<f64>) -> Result<(usize, usize)> {
    match *x.shape() {
        [len, d] => Ok((len, d)),
        _ => Err(Error::invalid("view", format!("expected [L, d], got {:?}", x.shape()))),
    }
}

/// Second-order backward difference `(3x_t − 4x_{t−1} + x_{t−2}) / (2·dt)`,
/// with the first two positions copied from position 2.
pub fn derivative_view(x: &Tensor<f64>, dt: f64) -> Result<Tensor<f64>> {
    let (len, d) = columns(x)?;
    if len < 3 {
        return Err(Error::invalid("derivative_view", format!("length {len} below 3")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("derivative_view", format!("dt must be positive, got {dt}")));
    }
    let v = x.data();
    let mut out = vec![0.0; len * d];
    for t in 2..len {
        for c in 0..d {
            out[t * d + c] = (3.0 * v[t * d + c] - 4.0 * v[(t - 1) * d + c] + v[(t - 2) * d + c]) / (2.0 * dt);
        }
    }
    for t in 0..2 {
        for c in 0..d {
            out[t * d + c] = out[2 * d + c];
        }
    }
    Tensor::new([len, d], out)
}

/// Per-channel modulus of the length-L DFT, both halves kept.
pub fn frequency_view(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (len, d) = columns(x)?;
    let mut out = vec![0.0; len * d];
    let mut buf = vec![Complex64::default(); len];
    let table = twiddles(len);
    for c in 0..d {
        for t in 0..len {
            buf[t] = Complex64::new(x.data()[t * d + c], 0.0);
        }
        let spec = if len.is_power_of_two() {
            fft_radix2(&mut buf, &table);
            buf.clone()
        } else {
            dft_with(&buf, &table)
        };
        for (k, z) in spec.iter().enumerate() {
            out[k * d + c] = z.norm();
        }
    }
    Tensor::new([len, d], out)
}

/// `e^{−2πik/L}` for `k < L`.
fn twiddles(len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64))
        .collect()
}

/// In-place iterative Cooley–Tukey; `buf.len()` must be a power of two.
fn fft_radix2(buf: &mut [Complex64], table: &[Complex64]) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    if n <= 1 {
        return;
    }
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut size = 2;
    while size <= n {
        let half = size / 2;
        let stride = n / size;
        for start in (0..n).step_by(size) {
            for k in 0..half {
                let w = table[k * stride];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        size *= 2;
    }
}

/// Direct DFT reusing a twiddle table, indexing by `(k·t) mod L`.
fn dft_with(x: &[Complex64], table: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| (0..n).map(|t| x[t] * table[(k * t) % n]).sum())
        .collect()
}

/// Reference transform by direct summation, evaluating every exponential.
pub fn dft_oracle(x: &[f64]) -> Vec<Complex64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * t) as f64 / n))
                .sum()
        })
        .collect()
}

/// Builds all three views of an already normalized `[L, d]` series.
pub fn extract_views(x: &Tensor<f64>, dt: f64) -> Result<ViewSet> {
    Ok(ViewSet {
        temporal: x.clone(),
        derivative: derivative_view(x, dt)?,
        frequency: frequency_view(x)?,
    })
}
