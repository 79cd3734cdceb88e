//! Tape-based reverse-mode differentiation.
//!
//! Operations append nodes to a [`Graph`]; node indices are a topological
//! order by construction, so [`Graph::backward`] walks them once in reverse.
//! Coarse fused nodes (layer norm, multi-head attention, the two losses)
//! carry hand-derived backward rules and keep only what those rules need.

use super::kernels::{self, AttnDims, AttnGrads, LayerNormGrads, MatmulPlan};
use super::tensor::{split_axis, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Relu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<T> },
    Mean { a: Var, axis: usize },
    Sum { a: Var },
    Reshape { a: Var },
    Stack { parts: Vec<Var>, axis: usize },
    Select { a: Var, axis: usize, index: usize },
    Concat { parts: Vec<Var>, axis: usize },
    InfoNce(Box<InfoNceCache<T>>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct InfoNceCache<T> {
    z: Var,
    z_aug: Var,
    tau: T,
    symmetric: bool,
    rows: usize,
    width: usize,
    u: Vec<T>,
    v: Vec<T>,
    norm_u: Vec<T>,
    norm_v: Vec<T>,
    row_probs: Vec<T>,
    col_probs: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation with reverse-mode gradients.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    // v - v is 0 for finite v and NaN otherwise; lane sums keep the loop vectorizable.
    let mut lanes = [T::zero(); 8];
    let chunks = data.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (l, &v) in lanes.iter_mut().zip(c) {
            *l = *l + (v - v);
        }
    }
    if lanes.iter().chain(rest).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = kernels::plan_matmul(self.shape(a), self.shape(b))?;
        let out = kernels::matmul_forward(&plan, self.value(a).data(), self.value(b).data());
        let shape = plan.out_shape.clone();
        self.push("matmul", shape, out, Op::MatMul { a, b, plan }, &[a, b])
    }

    /// `a + b`, where `b`'s shape equals a trailing run of `a`'s dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let w = xb.len();
        let mut out = xa.to_vec();
        for chunk in out.chunks_exact_mut(w) {
            chunk.iter_mut().zip(xb).for_each(|(o, &y)| *o = *o + y);
        }
        let shape = sa.to_vec();
        self.push("add", shape, out, Op::Add { a, b }, &[a, b])
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let factor = T::of(factor);
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a, factor }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", shape, out, Op::Relu { a }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, out, Op::Gelu { a }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let out = kernels::softmax_forward(self.value(a).data(), outer, len, inner);
        self.push("softmax", shape, out, Op::Softmax { a, axis }, &[a])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        for p in [gain, bias] {
            if self.shape(p) != [width] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let (out, xhat, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            T::of(eps),
        );
        let op = Op::LayerNorm { x, gain, bias, xhat, rstd };
        self.push("layer_norm", shape, out, op, &[x, gain, bias])
    }

    /// Multi-head scaled dot-product attention over `[.., seq, width]`
    /// inputs; every leading dim is an independent batch entry.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != shape.as_slice() {
                return Err(Error::shape("attention", &shape, self.shape(other)));
            }
        }
        if shape.len() < 2 {
            return Err(Error::invalid("attention", "inputs need a sequence and a feature axis"));
        }
        let width = shape[shape.len() - 1];
        let seq = shape[shape.len() - 2];
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid("attention", format!("width {width} not divisible by {heads} heads")));
        }
        let dims = AttnDims {
            batch: shape[..shape.len() - 2].iter().product(),
            seq,
            width,
            heads,
        };
        let (out, probs) =
            kernels::attention_forward(dims, self.value(q).data(), self.value(k).data(), self.value(v).data());
        self.push("attention", shape, out, Op::Attention { q, k, v, dims, probs }, &[q, k, v])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("mean", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut new_shape = shape;
        new_shape.remove(axis);
        self.push("mean", new_shape, out, Op::Mean { a, axis }, &[a])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: T = self.value(a).data().iter().copied().sum();
        self.push("sum", Vec::new(), vec![total], Op::Sum { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        self.push("reshape", shape.to_vec(), value.into_data(), Op::Reshape { a }, &[a])
    }

    /// Stacks equally shaped tensors along a new axis at position `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("stack", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() {
            return Err(Error::invalid("stack", format!("axis {axis} out of range for {base:?}")));
        }
        for p in parts {
            if self.shape(*p) != base.as_slice() {
                return Err(Error::shape("stack", &base, self.shape(*p)));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis..].iter().product();
        let count = parts.len();
        let mut out = vec![T::zero(); outer * count * inner];
        for (p, part) in parts.iter().enumerate() {
            let src = self.value(*part).data();
            for o in 0..outer {
                out[(o * count + p) * inner..(o * count + p + 1) * inner]
                    .copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape.insert(axis, count);
        self.push("stack", shape, out, Op::Stack { parts: parts.to_vec(), axis }, parts)
    }

    /// Slice `index` of `axis`, removing that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::invalid("select", format!("index {index} on axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + index) * inner..(o * len + index + 1) * inner]);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        self.push("select", new_shape, out, Op::Select { a, axis, index }, &[a])
    }

    /// Concatenates along an existing axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = vec![T::zero(); outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let len = self.shape(*p)[axis];
            let src = self.value(*p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", shape, out, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// InfoNCE with cosine similarity between rows of `z` and `z_aug`,
    /// averaged over rows; the positive for row i is row i of `z_aug` and the
    /// denominator runs over all rows of `z_aug`. With `symmetric`, the mean
    /// of this and the column-wise (aug → original) direction.
    pub fn info_nce(&mut self, z: Var, z_aug: Var, tau: f64, symmetric: bool) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        if shape.len() != 2 || self.shape(z_aug) != shape.as_slice() {
            return Err(Error::shape("info_nce", &shape, self.shape(z_aug)));
        }
        let (rows, width) = (shape[0], shape[1]);
        if rows < 2 {
            return Err(Error::invalid("info_nce", "needs at least two rows"));
        }
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let normalize = |x: &[T]| -> Result<(Vec<T>, Vec<T>)> {
            let mut unit = vec![T::zero(); x.len()];
            let mut norms = vec![T::zero(); rows];
            for r in 0..rows {
                let row = &x[r * width..(r + 1) * width];
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if !(norm > T::zero()) {
                    return Err(Error::invalid("info_nce", format!("row {r} has zero norm")));
                }
                norms[r] = norm;
                for c in 0..width {
                    unit[r * width + c] = row[c] / norm;
                }
            }
            Ok((unit, norms))
        };
        let (u, norm_u) = normalize(self.value(z).data())?;
        let (v, norm_v) = normalize(self.value(z_aug).data())?;
        let tau_t = T::of(tau);
        let mut logits = vec![T::zero(); rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                let dot: T = (0..width).map(|c| u[i * width + c] * v[j * width + c]).sum();
                logits[i * rows + j] = dot / tau_t;
            }
        }
        let row_probs = kernels::softmax_forward(&logits, rows, rows, 1);
        let mut loss = T::zero();
        for i in 0..rows {
            loss = loss - row_probs[i * rows + i].ln();
        }
        loss = loss / T::of(rows as f64);
        let col_probs = if symmetric {
            let cp = kernels::softmax_forward(&logits, 1, rows, rows);
            let mut col_loss = T::zero();
            for j in 0..rows {
                col_loss = col_loss - cp[j * rows + j].ln();
            }
            loss = T::of(0.5) * (loss + col_loss / T::of(rows as f64));
            cp
        } else {
            Vec::new()
        };
        let cache = InfoNceCache {
            z,
            z_aug,
            tau: tau_t,
            symmetric,
            rows,
            width,
            u,
            v,
            norm_u,
            norm_v,
            row_probs,
            col_probs,
        };
        self.push("info_nce", Vec::new(), vec![loss], Op::InfoNce(Box::new(cache)), &[z, z_aug])
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} outside [0, {classes})")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss = loss + (lse - row[y]);
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        loss = loss / T::of(labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", Vec::new(), vec![loss], op, &[logits])
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf
    /// that influences it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        for g in grads.iter().flatten() {
            finite("backward", g)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let target = &self.nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); target.value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| kernels::matmul_grad_lhs(plan, g, xb, da));
                acc(*b, &mut |db| kernels::matmul_grad_rhs(plan, g, xa, db));
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x));
                acc(*b, &mut |db| {
                    for chunk in g.chunks_exact(db.len()) {
                        db.iter_mut().zip(chunk).for_each(|(d, &x)| *d = *d + x);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] = da[i] + g[i] * xb[i];
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] = db[i] + g[i] * xa[i];
                    }
                });
            }
            Op::Scale { a, factor } => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *factor));
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        if x[i] > T::zero() {
                            da[i] = da[i] + g[i];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] = da[i] + g[i] * kernels::gelu_grad(x[i]);
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                acc(*a, &mut |da| kernels::softmax_backward(y, g, da, outer, len, inner));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let mut dx = self.take_grad(*x, grads);
                let mut dgain = self.take_grad(*gain, grads);
                let mut dbias = self.take_grad(*bias, grads);
                kernels::layer_norm_backward(
                    g,
                    xhat,
                    rstd,
                    gv,
                    LayerNormGrads {
                        dx: dx.as_deref_mut(),
                        dgain: dgain.as_deref_mut(),
                        dbias: dbias.as_deref_mut(),
                    },
                );
                self.put_grad(*x, dx, grads);
                self.put_grad(*gain, dgain, grads);
                self.put_grad(*bias, dbias, grads);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let mut dq = self.take_grad(*q, grads);
                let mut dk = self.take_grad(*k, grads);
                let mut dv = self.take_grad(*v, grads);
                kernels::attention_backward(
                    *dims,
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    AttnGrads {
                        dq: dq.as_deref_mut(),
                        dk: dk.as_deref_mut(),
                        dv: dv.as_deref_mut(),
                    },
                );
                self.put_grad(*q, dq, grads);
                self.put_grad(*k, dk, grads);
                self.put_grad(*v, dv, grads);
            }
            Op::Mean { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let inv = T::one() / T::of(len as f64);
                acc(*a, &mut |da| {
                    for o in 0..outer {
                        for j in 0..len {
                            let dst = &mut da[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (d, &x) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d = *d + x * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d = *d + g[0]));
            }
            Op::Reshape { a } => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x));
            }
            Op::Stack { parts, axis } => {
                let base = self.shape(parts[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[*axis..].iter().product();
                let count = parts.len();
                for (p, part) in parts.iter().enumerate() {
                    acc(*part, &mut |dp| {
                        for o in 0..outer {
                            let src = &g[(o * count + p) * inner..(o * count + p + 1) * inner];
                            let dst = &mut dp[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &x)| *d = *d + x);
                        }
                    });
                }
            }
            Op::Select { a, axis, index } => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                acc(*a, &mut |da| {
                    for o in 0..outer {
                        let dst = &mut da[(o * len + index) * inner..(o * len + index + 1) * inner];
                        dst.iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                            .for_each(|(d, &x)| *d = *d + x);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for part in parts {
                    let len = self.shape(*part)[*axis];
                    acc(*part, &mut |dp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut dp[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &x)| *d = *d + x);
                        }
                    });
                    offset += len;
                }
            }
            Op::InfoNce(c) => self.info_nce_backward(c, g[0], grads),
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                acc(*logits, &mut |dl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == y { T::one() } else { T::zero() };
                            dl[r * classes + c] = dl[r * classes + c] + (probs[r * classes + c] - target) * scale;
                        }
                    }
                });
            }
        }
    }

    fn info_nce_backward(&self, c: &InfoNceCache<T>, g: T, grads: &mut [Option<Vec<T>>]) {
        let (n, w) = (c.rows, c.width);
        // Gradient of the loss with respect to the similarity logits.
        let mut dlogits = vec![T::zero(); n * n];
        let row_weight = if c.symmetric { T::of(0.5) } else { T::one() } * g / T::of(n as f64);
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { T::one() } else { T::zero() };
                let mut d = (c.row_probs[i * n + j] - target) * row_weight;
                if c.symmetric {
                    d = d + (c.col_probs[i * n + j] - target) * row_weight;
                }
                dlogits[i * n + j] = d / c.tau;
            }
        }
        let unit_grad = |norms: &[T], unit: &[T], du: &[T], out: &mut [T]| {
            for r in 0..n {
                let row = r * w..(r + 1) * w;
                let (ur, dr) = (&unit[row.clone()], &du[row.clone()]);
                let radial: T = ur.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                for k in 0..w {
                    out[r * w + k] = out[r * w + k] + (dr[k] - ur[k] * radial) / norms[r];
                }
            }
        };
        if self.nodes[c.z.0].requires_grad {
            let mut du = vec![T::zero(); n * w];
            for i in 0..n {
                for j in 0..n {
                    let d = dlogits[i * n + j];
                    for k in 0..w {
                        du[i * w + k] = du[i * w + k] + d * c.v[j * w + k];
                    }
                }
            }
            let buf = grads[c.z.0].get_or_insert_with(|| vec![T::zero(); n * w]);
            unit_grad(&c.norm_u, &c.u, &du, buf);
        }
        if self.nodes[c.z_aug.0].requires_grad {
            let mut dv = vec![T::zero(); n * w];
            for i in 0..n {
                for j in 0..n {
                    let d = dlogits[i * n + j];
                    for k in 0..w {
                        dv[j * w + k] = dv[j * w + k] + d * c.u[i * w + k];
                    }
                }
            }
            let buf = grads[c.z_aug.0].get_or_insert_with(|| vec![T::zero(); n * w]);
            unit_grad(&c.norm_v, &c.v, &dv, buf);
        }
    }

    fn take_grad(&self, v: Var, grads: &mut [Option<Vec<T>>]) -> Option<Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]))
    }

    fn put_grad(&self, v: Var, g: Option<Vec<T>>, grads: &mut [Option<Vec<T>>]) {
        if g.is_some() {
            grads[v.0] = g;
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf, or `None` when the leaf does not
    /// influence the loss.
    pub fn get(&self, graph: &Graph<T>, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(graph.shape(v).to_vec(), g.clone()))
    }

    /// Like [`Gradients::get`] but zeros for tracked leaves that were not
    /// reached.
    pub fn get_or_zero(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(graph, v).unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_gradient_is_transposed_partner() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.param(t(&[3, 2], &[1., -1., 0.5, 2., -3., 1.]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        // d sum(AB) / dA[i][k] = sum_j B[k][j]
        let da = grads.get(&g, a).unwrap();
        assert_eq!(da.data(), &[0., 2.5, -2., 0., 2.5, -2.]);
        let db = grads.get(&g, b).unwrap();
        assert_eq!(db.data(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1., 2.]));
        let c = g.constant(t(&[2], &[3., 4.]));
        let m = g.mul(a, c).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(&g, c).is_none());
        assert_eq!(grads.get(&g, a).unwrap().data(), &[3., 4.]);
    }

    #[test]
    fn unreached_parameter_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1., 2.]));
        let unused = g.param(t(&[3], &[1., 2., 3.]));
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(&g, unused).is_none());
        assert_eq!(grads.get_or_zero(&g, unused).shape(), &[3]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[1], &[3.]));
        let sq = g.mul(a, a).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(&g, a).unwrap().data(), &[6.]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1., 2.]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn stack_select_roundtrip() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.param(t(&[2, 2], &[5., 6., 7., 8.]));
        let s = g.stack(&[a, b], 1).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 2]);
        assert_eq!(g.value(s).data(), &[1., 2., 5., 6., 3., 4., 7., 8.]);
        let back = g.select(s, 1, 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(b).data());
    }

    #[test]
    fn concat_last_axis() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2, 1], &[1., 2.]));
        let b = g.param(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
    }

    #[test]
    fn info_nce_rejects_zero_rows() {
        let mut g = Graph::<f64>::new();
        let z = g.param(t(&[2, 2], &[0., 0., 1., 0.]));
        let za = g.param(t(&[2, 2], &[1., 0., 0., 1.]));
        assert!(g.info_nce(z, za, 0.07, false).is_err());
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let l = g.param(t(&[1, 2], &[1., 2.]));
        assert!(g.cross_entropy(l, &[2]).is_err());
    }
}
