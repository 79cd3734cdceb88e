//! Raw loops shared by the eager tensor ops and the recorded graph.
//!
//! Every routine here walks its data in a fixed order, so identical inputs
//! give bit-identical outputs.

use super::tensor::Scalar;
use crate::error::{Error, Result};

/// A matrix view into a flat buffer: element (i, j) lives at
/// `off + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(off: usize, cols: usize) -> Self {
        View { off, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` block.
    pub fn transposed(off: usize, cols: usize) -> Self {
        View { off, rs: 1, cs: cols }
    }

    fn fits(self, len: usize, rows: usize, cols: usize) -> bool {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs < len
    }
}

const SMALL_GEMM: usize = 2048;

/// `c = a·b` (or `c += a·b` with `accumulate`) for an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    va: View,
    b: &[T],
    vb: View,
    c: &mut [T],
    vc: View,
    accumulate: bool,
) {
    assert!(va.fits(a.len(), m, k), "gemm: lhs view out of bounds");
    assert!(vb.fits(b.len(), k, n), "gemm: rhs view out of bounds");
    assert!(vc.fits(c.len(), m, n), "gemm: output view out of bounds");
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc = acc + a[va.off + i * va.rs + p * va.cs] * b[vb.off + p * vb.rs + j * vb.cs];
                }
                let slot = &mut c[vc.off + i * vc.rs + j * vc.cs];
                *slot = if accumulate { *slot + acc } else { acc };
            }
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the three views were bounds-checked above and `c` is a unique
    // borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Batched matrix product layout with numpy-style batch broadcasting.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (lhs batch index, rhs batch index) for every output batch entry.
    pub pairs: Vec<(usize, usize)>,
    /// The rhs is a single matrix shared by every lhs row: one big product.
    pub flat: bool,
}

pub(crate) fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ba.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ba), pad(bb));
    let mut batch = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(Error::shape("matmul", a, b));
        }
        batch.push(x.max(y));
    }
    let count: usize = batch.iter().product();
    let flat = pb.iter().all(|&d| d == 1);
    let mut pairs = Vec::with_capacity(count);
    let mut idx = vec![0usize; rank];
    for _ in 0..count {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..rank {
            ia = ia * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            ib = ib * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((ia, ib));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let flat = flat && pairs.iter().enumerate().all(|(o, &(ia, _))| ia == o);
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
        flat,
    })
}

pub(crate) fn matmul_forward<T: Scalar>(plan: &MatmulPlan, a: &[T], b: &[T]) -> Vec<T> {
    let MatmulPlan { m, k, n, .. } = *plan;
    let mut out = vec![T::zero(); plan.pairs.len() * m * n];
    if plan.flat {
        let rows = plan.pairs.len() * m;
        gemm(rows, k, n, a, View::rows(0, k), b, View::rows(0, n), &mut out, View::rows(0, n), false);
        return out;
    }
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        gemm(
            m,
            k,
            n,
            a,
            View::rows(ia * m * k, k),
            b,
            View::rows(ib * k * n, n),
            &mut out,
            View::rows(o * m * n, n),
            false,
        );
    }
    out
}

/// `da += g · bᵀ` for every batch entry.
pub(crate) fn matmul_grad_lhs<T: Scalar>(plan: &MatmulPlan, g: &[T], b: &[T], da: &mut [T]) {
    let MatmulPlan { m, k, n, .. } = *plan;
    if plan.flat {
        let rows = plan.pairs.len() * m;
        gemm(rows, n, k, g, View::rows(0, n), b, View::transposed(0, n), da, View::rows(0, k), true);
        return;
    }
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        gemm(
            m,
            n,
            k,
            g,
            View::rows(o * m * n, n),
            b,
            View::transposed(ib * k * n, n),
            da,
            View::rows(ia * m * k, k),
            true,
        );
    }
}

/// `db += aᵀ · g` for every batch entry.
pub(crate) fn matmul_grad_rhs<T: Scalar>(plan: &MatmulPlan, g: &[T], a: &[T], db: &mut [T]) {
    let MatmulPlan { m, k, n, .. } = *plan;
    if plan.flat {
        let rows = plan.pairs.len() * m;
        gemm(k, rows, n, a, View::transposed(0, k), g, View::rows(0, n), db, View::rows(0, n), true);
        return;
    }
    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
        gemm(
            k,
            m,
            n,
            a,
            View::transposed(ia * m * k, k),
            g,
            View::rows(o * m * n, n),
            db,
            View::rows(ib * k * n, n),
            true,
        );
    }
}

/// Softmax over the middle extent of an (outer, len, inner) layout.
pub(crate) fn softmax_forward<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                y[at(j)] = y[at(j)] / total;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    dx: &mut [T],
    outer: usize,
    len: usize,
    inner: usize,
) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = dx[at(j)] + y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
}

/// Row-wise layer normalization; returns (output, normalized input, 1/std).
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let width = gain.len();
    let rows = x.len() / width;
    let inv_w = T::one() / T::of(width as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let h = (row[c] - mean) * rs;
            xhat[r * width + c] = h;
            y[r * width + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstd)
}

pub(crate) struct LayerNormGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dgain: Option<&'a mut [T]>,
    pub dbias: Option<&'a mut [T]>,
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    grads: LayerNormGrads<'_, T>,
) {
    let width = gain.len();
    let rows = rstd.len();
    let inv_w = T::one() / T::of(width as f64);
    let LayerNormGrads { mut dx, mut dgain, mut dbias } = grads;
    for r in 0..rows {
        let span = r * width..(r + 1) * width;
        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
        if let Some(dg) = dgain.as_deref_mut() {
            for c in 0..width {
                dg[c] = dg[c] + gr[c] * hr[c];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for c in 0..width {
                db[c] = db[c] + gr[c];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut mean_d = T::zero();
            let mut mean_dh = T::zero();
            for c in 0..width {
                let d = gr[c] * gain[c];
                mean_d = mean_d + d;
                mean_dh = mean_dh + d * hr[c];
            }
            mean_d = mean_d * inv_w;
            mean_dh = mean_dh * inv_w;
            let out = &mut dx[span];
            for c in 0..width {
                let d = gr[c] * gain[c];
                out[c] = out[c] + rstd[r] * (d - mean_d - hr[c] * mean_dh);
            }
        }
    }
}

/// Geometry of a multi-head attention call over `[batch, seq, width]` inputs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn base(&self, b: usize, h: usize) -> usize {
        b * self.seq * self.width + h * self.head_dim()
    }

    fn probs_base(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.seq * self.seq
    }
}

/// Scaled dot-product attention per head; returns (output, probabilities).
pub(crate) fn attention_forward<T: Scalar>(dims: AttnDims, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let AttnDims { batch, seq, width, heads } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = dims.base(b, h);
            let pb = dims.probs_base(b, h);
            gemm(
                seq,
                dh,
                seq,
                q,
                View::rows(base, width),
                k,
                View::transposed(base, width),
                &mut probs,
                View::rows(pb, seq),
                false,
            );
            for i in 0..seq {
                let row = &mut probs[pb + i * seq..pb + (i + 1) * seq];
                let mut max = T::neg_infinity();
                for s in row.iter_mut() {
                    *s = *s * scale;
                    max = max.max(*s);
                }
                row.iter_mut().for_each(|s| *s = *s - max);
                T::exp_in_place(row);
                let total = row.iter().fold(T::zero(), |a, &s| a + s);
                for s in row.iter_mut() {
                    *s = *s / total;
                }
            }
            gemm(
                seq,
                seq,
                dh,
                &probs,
                View::rows(pb, seq),
                v,
                View::rows(base, width),
                &mut out,
                View::rows(base, width),
                false,
            );
        }
    }
    (out, probs)
}

pub(crate) struct AttnGrads<'a, T> {
    pub dq: Option<&'a mut [T]>,
    pub dk: Option<&'a mut [T]>,
    pub dv: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    dims: AttnDims,
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grads: AttnGrads<'_, T>,
) {
    let AttnDims { batch, seq, width, heads } = dims;
    let dh = dims.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let AttnGrads { mut dq, mut dk, mut dv } = grads;
    let need_scores = dq.is_some() || dk.is_some();
    let mut ds = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = dims.base(b, h);
            let pb = dims.probs_base(b, h);
            if let Some(dv) = dv.as_deref_mut() {
                gemm(
                    seq,
                    seq,
                    dh,
                    probs,
                    View::transposed(pb, seq),
                    g,
                    View::rows(base, width),
                    dv,
                    View::rows(base, width),
                    true,
                );
            }
            if !need_scores {
                continue;
            }
            // dP = dO · Vᵀ, then through the row softmax.
            gemm(
                seq,
                dh,
                seq,
                g,
                View::rows(base, width),
                v,
                View::transposed(base, width),
                &mut ds,
                View::rows(0, seq),
                false,
            );
            for i in 0..seq {
                let p = &probs[pb + i * seq..pb + (i + 1) * seq];
                let row = &mut ds[i * seq..(i + 1) * seq];
                let dot: T = row.iter().zip(p).map(|(&d, &pp)| d * pp).sum();
                for (d, &pp) in row.iter_mut().zip(p) {
                    *d = pp * (*d - dot) * scale;
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                gemm(seq, seq, dh, &ds, View::rows(0, seq), k, View::rows(base, width), dq, View::rows(base, width), true);
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm(
                    seq,
                    seq,
                    dh,
                    &ds,
                    View::transposed(0, seq),
                    q,
                    View::rows(base, width),
                    dk,
                    View::rows(base, width),
                    true,
                );
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn large_and_small_gemm_paths_agree_with_naive_product() {
        for &(m, k, n) in &[(3, 4, 5), (40, 33, 29)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a, View::rows(0, k), &b, View::rows(0, n), &mut c, View::rows(0, n), false);
            assert_eq!(c, naive(m, k, n, &a, &b));
        }
    }

    #[test]
    fn broadcast_plan_pairs_batches() {
        let plan = plan_matmul(&[2, 1, 3, 4], &[5, 4, 6]).unwrap();
        assert_eq!(plan.out_shape, vec![2, 5, 3, 6]);
        assert_eq!(plan.pairs[0], (0, 0));
        assert_eq!(plan.pairs[6], (1, 1));
        assert!(!plan.flat);
        assert!(plan_matmul(&[7, 3, 4], &[4, 2]).unwrap().flat);
        assert!(plan_matmul(&[3, 4], &[5, 2]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
