//! Eager (non-recording) versions of the core tensor operations.

use super::kernels;
use super::tensor::{split_axis, Scalar, Tensor};
use crate::error::{Error, Result};

fn checked<T: Scalar>(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(Tensor::from_parts(shape, data))
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Batched matrix product `[.., m, k] x [.., k, n]`; batch dims broadcast.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = kernels::plan_matmul(a.shape(), b.shape())?;
    let out = kernels::matmul_forward(&plan, a.data(), b.data());
    checked("matmul", plan.out_shape, out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    checked("softmax", x.shape().to_vec(), kernels::softmax_forward(x.data(), outer, len, inner))
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let width = *x.shape().last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
    for p in [gain, bias] {
        if p.shape() != [width] {
            return Err(Error::shape("layer_norm", x.shape(), p.shape()));
        }
    }
    let (y, _, _) = kernels::layer_norm_forward(x.data(), gain.data(), bias.data(), T::of(eps));
    checked("layer_norm", x.shape().to_vec(), y)
}
