//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends one node holding its output value and whatever
//! it needs for the backward pass. Nodes are only ever appended, so the node
//! order is already a topological order and [`Tape::backward`] is a single
//! reverse sweep.

use super::error::AdError;
use super::params::ParamId;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Std,
    Max,
}

impl ReduceKind {
    fn name(self) -> &'static str {
        match self {
            ReduceKind::Mean => "mean",
            ReduceKind::Std => "std",
            ReduceKind::Max => "max",
        }
    }
}

/// Batch statistics produced by a train-mode batchnorm, used to update running buffers.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the convention used for running estimates.
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        inp: usize,
        out: usize,
    },
    GroupedLinear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        groups: usize,
        inp: usize,
        out: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        outer: usize,
        n: usize,
        inner: usize,
        mask: Option<Vec<bool>>,
        counts: Vec<usize>,
        argmax: Vec<usize>,
        means: Vec<T>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    AttnLogits {
        q: Var,
        k: Var,
        batch: usize,
        heads: usize,
        steps: usize,
        dk: usize,
        scale: T,
    },
    WeightedSum {
        a: Var,
        v: Var,
        batch: usize,
        heads: usize,
        steps: usize,
        dim: usize,
    },
    FocalLoss {
        logits: Var,
        labels: Vec<usize>,
        gamma: T,
        probs: Vec<T>,
        classes: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize), AdError> {
    if axis >= shape.len() {
        return Err(AdError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that does not receive a gradient.
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

    /// Trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        let v = self.leaf(value.clone(), true);
        self.params.push((v, id));
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AdError> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.same_shape("add", a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, AdError> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| *x * s).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push("scale", value, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let total: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|x| if *x > T::zero() { *x } else { T::zero() })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push("relu", value, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AdError> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        )
    }

    /// `x·Wᵀ + b` over the last axis of `x`; `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AdError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 2 || sx.is_empty() || sx[sx.len() - 1] != sw[1] || sb != [sw[0]] {
            return Err(AdError::Shape {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (inp, out) = (sw[1], sw[0]);
        let rows = self.value(x).numel() / inp.max(1);
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = out;
        let bias = self.value(b).data();
        let mut y = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        T::gemm(
            rows,
            inp,
            out,
            self.value(x).data(),
            inp as isize,
            1,
            self.value(w).data(),
            1,
            inp as isize,
            T::one(),
            &mut y,
            out as isize,
            1,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            "linear",
            Tensor::new(shape, y)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            rg,
        )
    }

    /// Independent affine map per group: `x [rows, g, in]`, `w [g, out, in]`, `b [g, out]`.
    pub fn grouped_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AdError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3
            || sw.len() != 3
            || sx[1] != sw[0]
            || sx[2] != sw[2]
            || sb != [sw[0], sw[1]]
        {
            return Err(AdError::Shape {
                op: "grouped_linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (rows, groups, inp, out) = (sx[0], sx[1], sx[2], sw[1]);
        let bias = self.value(b).data();
        let mut y = Vec::with_capacity(rows * groups * out);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        for g in 0..groups {
            T::gemm(
                rows,
                inp,
                out,
                &xv[g * inp..],
                (groups * inp) as isize,
                1,
                &wv[g * out * inp..(g + 1) * out * inp],
                1,
                inp as isize,
                T::one(),
                &mut y[g * out..],
                (groups * out) as isize,
                1,
            );
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            "grouped_linear",
            Tensor::new(vec![rows, groups, out], y)?,
            Op::GroupedLinear {
                x,
                w,
                b,
                rows,
                groups,
                inp,
                out,
            },
            rg,
        )
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize), AdError> {
        let sx = self.shape(x);
        let features = *sx.last().ok_or(AdError::Shape {
            op: "batchnorm",
            lhs: sx.to_vec(),
            rhs: self.shape(gamma).to_vec(),
        })?;
        if self.shape(gamma) != [features] || self.shape(beta) != [features] {
            return Err(AdError::Shape {
                op: "batchnorm",
                lhs: sx.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        Ok((self.value(x).numel() / features.max(1), features))
    }

    /// Normalizes every feature (last axis) with the statistics of this batch.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), AdError> {
        let (rows, f) = self.check_bn(x, gamma, beta)?;
        if rows < 2 {
            return Err(AdError::BatchTooSmall { rows });
        }
        let xv = self.value(x).data();
        let mut mean = vec![0f64; f];
        for row in xv.chunks_exact(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0f64; f];
        for row in xv.chunks_exact(f) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.f64() - m;
                *s += d * d;
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / rows as f64).collect();
        let inv_std: Vec<T> = biased
            .iter()
            .map(|v| T::of(1.0 / (v + eps).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut y = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(f) {
            for j in 0..f {
                let h = (row[j] - mean_t[j]) * inv_std[j];
                xhat.push(h);
                y.push(gv[j] * h + bv[j]);
            }
        }
        let stats = BatchStats {
            mean,
            var: var.iter().map(|s| s / (rows - 1) as f64).collect(),
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            "batchnorm",
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            rg,
        )?;
        Ok((v, stats))
    }

    /// Normalizes with frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var, AdError> {
        let (_, f) = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(AdError::Shape {
                op: "batchnorm",
                lhs: self.shape(x).to_vec(),
                rhs: vec![running_mean.len()],
            });
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|v| T::of(1.0 / (v.f64() + eps).sqrt()))
            .collect();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut y = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(f) {
            for j in 0..f {
                let h = (row[j] - running_mean[j]) * inv_std[j];
                xhat.push(h);
                y.push(gv[j] * h + bv[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "batchnorm",
            Tensor::new(shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            rg,
        )
    }

    /// Softmax along `axis`. Entries whose `mask` is false get weight exactly 0;
    /// the mask, when given, has the same number of elements as `x`.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var, AdError> {
        let (outer, n, inner) = split_axis("softmax", self.shape(x), axis)?;
        if n == 0 {
            return Err(AdError::EmptyAxis { op: "softmax" });
        }
        let xv = self.value(x).data();
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(AdError::Shape {
                    op: "softmax",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let on = |idx: usize| mask.is_none_or(|m| m[idx]);
        let mut y = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    if on(at(j)) && xv[at(j)] > max {
                        max = xv[at(j)];
                    }
                }
                if max == T::neg_infinity() {
                    return Err(AdError::EmptyAxis { op: "softmax" });
                }
                let mut total = T::zero();
                for j in 0..n {
                    if on(at(j)) {
                        let e = (xv[at(j)] - max).exp();
                        y[at(j)] = e;
                        total += e;
                    }
                }
                for j in 0..n {
                    y[at(j)] = y[at(j)] / total;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(
            "softmax",
            Tensor::new(shape, y)?,
            Op::Softmax { x, outer, n, inner },
            rg,
        )
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, AdError> {
        self.reduce(x, axis, ReduceKind::Mean, None)
    }

    /// Population standard deviation (divides by n).
    pub fn std(&mut self, x: Var, axis: usize) -> Result<Var, AdError> {
        self.reduce(x, axis, ReduceKind::Std, None)
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var, AdError> {
        self.reduce(x, axis, ReduceKind::Max, None)
    }

    /// Reduction over `axis` restricted to positions where `mask` is true.
    ///
    /// `mask` is indexed `[outer, n]`: one flag per position along the axis for
    /// each leading index, shared across trailing dimensions.
    pub fn reduce(
        &mut self,
        x: Var,
        axis: usize,
        kind: ReduceKind,
        mask: Option<&[bool]>,
    ) -> Result<Var, AdError> {
        let op = kind.name();
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(op, &shape, axis)?;
        if let Some(m) = mask {
            if m.len() != outer * n {
                return Err(AdError::Shape {
                    op,
                    lhs: shape.clone(),
                    rhs: vec![m.len()],
                });
            }
        }
        let on = |o: usize, j: usize| mask.is_none_or(|m| m[o * n + j]);
        let counts: Vec<usize> = (0..outer)
            .map(|o| (0..n).filter(|&j| on(o, j)).count())
            .collect();
        if counts.contains(&0) {
            return Err(AdError::EmptyAxis { op });
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        let mut means = Vec::new();
        match kind {
            ReduceKind::Mean | ReduceKind::Std => {
                // Accumulate in f64 so the result barely depends on element order.
                let mut mu = vec![0.0f64; outer * inner];
                for o in 0..outer {
                    let acc = &mut mu[o * inner..(o + 1) * inner];
                    for j in (0..n).filter(|&j| on(o, j)) {
                        let row = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v.f64();
                        }
                    }
                    let c = counts[o] as f64;
                    acc.iter_mut().for_each(|a| *a /= c);
                }
                if kind == ReduceKind::Std {
                    for o in 0..outer {
                        let m = &mu[o * inner..(o + 1) * inner];
                        let mut acc = vec![0.0f64; inner];
                        let mut scale = vec![0.0f64; inner];
                        for j in (0..n).filter(|&j| on(o, j)) {
                            let row = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                            for (((a, s), v), m) in acc.iter_mut().zip(&mut scale).zip(row).zip(m) {
                                let d = v.f64() - m;
                                *a += d * d;
                                *s = s.max(v.f64().abs());
                            }
                        }
                        let c = counts[o] as f64;
                        // Equal entries can leave a rounding-level spread in the
                        // f64 mean; that is a zero std, not a tiny one.
                        let floor = 4.0 * c * f64::EPSILON;
                        for ((dst, a), s) in out[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(acc)
                            .zip(scale)
                        {
                            let sd = (a / c).sqrt();
                            *dst = T::of(if sd <= floor * s { 0.0 } else { sd });
                        }
                    }
                    means = mu.iter().map(|&v| T::of(v)).collect();
                } else {
                    out = mu.iter().map(|&v| T::of(v)).collect();
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best: Option<(usize, T)> = None;
                        for j in (0..n).filter(|&j| on(o, j)) {
                            let v = xv[(o * n + j) * inner + i];
                            if best.is_none_or(|(_, b)| v > b) {
                                best = Some((j, v));
                            }
                        }
                        let (j, v) = best.expect("nonempty axis");
                        argmax[o * inner + i] = j;
                        out[o * inner + i] = v;
                    }
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        self.push(
            op,
            Tensor::new(oshape, out)?,
            Op::Reduce {
                x,
                kind,
                outer,
                n,
                inner,
                mask: mask.map(<[bool]>::to_vec),
                counts,
                argmax,
                means,
            },
            rg,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AdError> {
        let first = *parts.first().ok_or(AdError::EmptyAxis { op: "concat" })?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut total = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AdError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
            chunks.push((p, s[axis] * inner));
        }
        let width: usize = chunks.iter().map(|c| c.1).sum();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            for &(p, c) in &chunks {
                out.extend_from_slice(&self.value(p).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: chunks,
                outer,
            },
            rg,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, AdError> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("narrow", &shape, axis)?;
        if start + len > n {
            return Err(AdError::Shape {
                op: "narrow",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        self.push(
            "narrow",
            Tensor::new(oshape, out)?,
            Op::Narrow {
                x,
                outer,
                n,
                inner,
                start,
                len,
            },
            rg,
        )
    }

    /// Scaled dot products of one query per head with every key:
    /// `q [B, H, dk]`, `k [B, T, H, dk]` → `[B, H, T]`.
    pub fn attention_logits(&mut self, q: Var, k: Var, scale: T) -> Result<Var, AdError> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.len() != 3 || sk.len() != 4 || sq[0] != sk[0] || sq[1] != sk[2] || sq[2] != sk[3] {
            return Err(AdError::Shape {
                op: "attention_logits",
                lhs: sq.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (batch, heads, dk, steps) = (sq[0], sq[1], sq[2], sk[1]);
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![T::zero(); batch * heads * steps];
        for b in 0..batch {
            for h in 0..heads {
                let qrow = &qv[(b * heads + h) * dk..(b * heads + h + 1) * dk];
                for t in 0..steps {
                    let krow = &kv[((b * steps + t) * heads + h) * dk
                        ..((b * steps + t) * heads + h + 1) * dk];
                    let dot: T = qrow.iter().zip(krow).map(|(a, c)| *a * *c).sum();
                    out[(b * heads + h) * steps + t] = dot * scale;
                }
            }
        }
        let rg = self.rg(q) || self.rg(k);
        self.push(
            "attention_logits",
            Tensor::new(vec![batch, heads, steps], out)?,
            Op::AttnLogits {
                q,
                k,
                batch,
                heads,
                steps,
                dk,
                scale,
            },
            rg,
        )
    }

    /// Attention-weighted sums: `a [B, H, T]`, `v [B, T, D]` → `[B, H, D]`.
    pub fn weighted_sum(&mut self, a: Var, v: Var) -> Result<Var, AdError> {
        let (sa, sv) = (self.shape(a), self.shape(v));
        if sa.len() != 3 || sv.len() != 3 || sa[0] != sv[0] || sa[2] != sv[1] {
            return Err(AdError::Shape {
                op: "weighted_sum",
                lhs: sa.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let (batch, heads, steps, dim) = (sa[0], sa[1], sa[2], sv[2]);
        let mut out = vec![T::zero(); batch * heads * dim];
        let (av, vv) = (self.value(a).data(), self.value(v).data());
        for b in 0..batch {
            for h in 0..heads {
                let orow = &mut out[(b * heads + h) * dim..(b * heads + h + 1) * dim];
                for t in 0..steps {
                    let w = av[(b * heads + h) * steps + t];
                    let vrow = &vv[(b * steps + t) * dim..(b * steps + t + 1) * dim];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += w * *x;
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(v);
        self.push(
            "weighted_sum",
            Tensor::new(vec![batch, heads, dim], out)?,
            Op::WeightedSum {
                a,
                v,
                batch,
                heads,
                steps,
                dim,
            },
            rg,
        )
    }

    /// Batch-mean focal loss `(1 − p)^γ · (−ln p)` with `p` the softmax
    /// probability of the true class. `logits` is `[B, K]`.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        labels: &[usize],
        gamma: f64,
    ) -> Result<Var, AdError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(AdError::Shape {
                op: "focal_loss",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(AdError::Label { label, classes });
        }
        let zv = self.value(logits).data();
        let mut probs = Vec::with_capacity(zv.len());
        let mut total = 0f64;
        for (row, &y) in zv.chunks_exact(classes).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln() + max;
            probs.extend(row.iter().map(|v| T::of((v.f64() - lse).exp())));
            let log_p = row[y].f64() - lse;
            let p = log_p.exp();
            total += (1.0 - p).powf(gamma) * -log_p;
        }
        let rg = self.rg(logits);
        self.push(
            "focal_loss",
            Tensor::scalar(T::of(total / batch as f64)),
            Op::FocalLoss {
                logits,
                labels: labels.to_vec(),
                gamma: T::of(gamma),
                probs,
                classes,
            },
            rg,
        )
    }

    /// Reverse sweep from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>, AdError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(AdError::NonScalarLoss(lv.shape().to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        fn slot<'a, T: Scalar>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> Option<&'a mut Vec<T>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Add(a, b) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += *y);
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x += *y);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for ((x, y), w) in ga.iter_mut().zip(&g).zip(&bv) {
                            *x += *y * *w;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *b) {
                        for ((x, y), w) in gb.iter_mut().zip(&g).zip(&av) {
                            *x += *y * *w;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += *y * *s);
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::Relu(a) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        for ((x, y), o) in ga.iter_mut().zip(&g).zip(node.value.data()) {
                            if *o > T::zero() {
                                *x += *y;
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = slot(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += *y);
                    }
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if let Some(ga) = slot(&mut grads, &nodes, a) {
                        // dA = G·Bᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            &g,
                            n as isize,
                            1,
                            val(b),
                            1,
                            n as isize,
                            T::one(),
                            ga,
                            k as isize,
                            1,
                        );
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, b) {
                        // dB = Aᵀ·G
                        T::gemm(
                            k,
                            m,
                            n,
                            val(a),
                            1,
                            k as isize,
                            &g,
                            n as isize,
                            1,
                            T::one(),
                            gb,
                            n as isize,
                            1,
                        );
                    }
                }
                &Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    inp,
                    out,
                } => {
                    if let Some(gx) = slot(&mut grads, &nodes, x) {
                        T::gemm(
                            rows,
                            out,
                            inp,
                            &g,
                            out as isize,
                            1,
                            val(w),
                            inp as isize,
                            1,
                            T::one(),
                            gx,
                            inp as isize,
                            1,
                        );
                    }
                    if let Some(gw) = slot(&mut grads, &nodes, w) {
                        T::gemm(
                            out,
                            rows,
                            inp,
                            &g,
                            1,
                            out as isize,
                            val(x),
                            inp as isize,
                            1,
                            T::one(),
                            gw,
                            inp as isize,
                            1,
                        );
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, b) {
                        for row in g.chunks_exact(out) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += *y);
                        }
                    }
                }
                &Op::GroupedLinear {
                    x,
                    w,
                    b,
                    rows,
                    groups,
                    inp,
                    out,
                } => {
                    let (gs, xs) = ((groups * out) as isize, (groups * inp) as isize);
                    if let Some(gx) = slot(&mut grads, &nodes, x) {
                        for grp in 0..groups {
                            T::gemm(
                                rows,
                                out,
                                inp,
                                &g[grp * out..],
                                gs,
                                1,
                                &val(w)[grp * out * inp..(grp + 1) * out * inp],
                                inp as isize,
                                1,
                                T::one(),
                                &mut gx[grp * inp..],
                                xs,
                                1,
                            );
                        }
                    }
                    if let Some(gw) = slot(&mut grads, &nodes, w) {
                        for grp in 0..groups {
                            T::gemm(
                                out,
                                rows,
                                inp,
                                &g[grp * out..],
                                1,
                                gs,
                                &val(x)[grp * inp..],
                                xs,
                                1,
                                T::one(),
                                &mut gw[grp * out * inp..(grp + 1) * out * inp],
                                inp as isize,
                                1,
                            );
                        }
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, b) {
                        for row in g.chunks_exact(groups * out) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += *y);
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let f = inv_std.len();
                    let rows = g.len() / f;
                    let gv = val(*gamma).to_vec();
                    let mut sum_dy = vec![0f64; f];
                    let mut sum_dy_xhat = vec![0f64; f];
                    for (grow, hrow) in g.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                        for j in 0..f {
                            sum_dy[j] += grow[j].f64();
                            sum_dy_xhat[j] += (grow[j] * hrow[j]).f64();
                        }
                    }
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        if *train {
                            let inv_n = 1.0 / rows as f64;
                            let c1: Vec<T> = (0..f).map(|j| T::of(sum_dy[j] * inv_n)).collect();
                            let c2: Vec<T> =
                                (0..f).map(|j| T::of(sum_dy_xhat[j] * inv_n)).collect();
                            let scale: Vec<T> = (0..f).map(|j| gv[j] * inv_std[j]).collect();
                            for ((gxr, grow), hrow) in gx
                                .chunks_exact_mut(f)
                                .zip(g.chunks_exact(f))
                                .zip(xhat.chunks_exact(f))
                            {
                                for j in 0..f {
                                    gxr[j] += scale[j] * (grow[j] - c1[j] - hrow[j] * c2[j]);
                                }
                            }
                        } else {
                            let scale: Vec<T> = (0..f).map(|j| gv[j] * inv_std[j]).collect();
                            for (gxr, grow) in gx.chunks_exact_mut(f).zip(g.chunks_exact(f)) {
                                for j in 0..f {
                                    gxr[j] += scale[j] * grow[j];
                                }
                            }
                        }
                    }
                    if let Some(gg) = slot(&mut grads, &nodes, *gamma) {
                        gg.iter_mut()
                            .zip(&sum_dy_xhat)
                            .for_each(|(x, s)| *x += T::of(*s));
                    }
                    if let Some(gb) = slot(&mut grads, &nodes, *beta) {
                        gb.iter_mut()
                            .zip(&sum_dy)
                            .for_each(|(x, s)| *x += T::of(*s));
                    }
                }
                &Op::Softmax { x, outer, n, inner } => {
                    if let Some(gx) = slot(&mut grads, &nodes, x) {
                        let y = node.value.data();
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |j: usize| (o * n + j) * inner + i;
                                let dot: T = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                                for j in 0..n {
                                    gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::Reduce {
                    x,
                    kind,
                    outer,
                    n,
                    inner,
                    mask,
                    counts,
                    argmax,
                    means,
                } => {
                    let (outer, n, inner) = (*outer, *n, *inner);
                    let on = |o: usize, j: usize| mask.as_ref().is_none_or(|m| m[o * n + j]);
                    let xv = val(*x).to_vec();
                    let y = node.value.data();
                    if let Some(gx) = slot(&mut grads, &nodes, *x) {
                        for o in 0..outer {
                            let go = &g[o * inner..(o + 1) * inner];
                            match kind {
                                ReduceKind::Mean => {
                                    let c = T::of(counts[o] as f64);
                                    for j in (0..n).filter(|&j| on(o, j)) {
                                        let row =
                                            &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                                        row.iter_mut().zip(go).for_each(|(a, b)| *a += *b / c);
                                    }
                                }
                                ReduceKind::Std => {
                                    let c = T::of(counts[o] as f64);
                                    let mu = &means[o * inner..(o + 1) * inner];
                                    let sd = &y[o * inner..(o + 1) * inner];
                                    let coef: Vec<T> = (0..inner)
                                        .map(|i| {
                                            if sd[i] > T::zero() {
                                                go[i] / (c * sd[i])
                                            } else {
                                                T::zero()
                                            }
                                        })
                                        .collect();
                                    for j in (0..n).filter(|&j| on(o, j)) {
                                        let base = (o * n + j) * inner;
                                        for i in 0..inner {
                                            gx[base + i] += coef[i] * (xv[base + i] - mu[i]);
                                        }
                                    }
                                }
                                ReduceKind::Max => {
                                    for i in 0..inner {
                                        let j = argmax[o * inner + i];
                                        gx[(o * n + j) * inner + i] += go[i];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Concat { parts, outer } => {
                    let width: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(p, c) in parts {
                        if let Some(gp) = slot(&mut grads, &nodes, p) {
                            for o in 0..*outer {
                                let src = &g[o * width + offset..o * width + offset + c];
                                gp[o * c..(o + 1) * c]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, b)| *a += *b);
                            }
                        }
                        offset += c;
                    }
                }
                &Op::Narrow {
                    x,
                    outer,
                    n,
                    inner,
                    start,
                    len,
                } => {
                    if let Some(gx) = slot(&mut grads, &nodes, x) {
                        for o in 0..outer {
                            let dst =
                                &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                        }
                    }
                }
                &Op::AttnLogits {
                    q,
                    k,
                    batch,
                    heads,
                    steps,
                    dk,
                    scale,
                } => {
                    let (qv, kv) = (val(q).to_vec(), val(k).to_vec());
                    let krow = |b: usize, t: usize, h: usize| ((b * steps + t) * heads + h) * dk;
                    if let Some(gq) = slot(&mut grads, &nodes, q) {
                        for b in 0..batch {
                            for h in 0..heads {
                                for t in 0..steps {
                                    let w = g[(b * heads + h) * steps + t] * scale;
                                    let kr = krow(b, t, h);
                                    for j in 0..dk {
                                        gq[(b * heads + h) * dk + j] += w * kv[kr + j];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gk) = slot(&mut grads, &nodes, k) {
                        for b in 0..batch {
                            for h in 0..heads {
                                for t in 0..steps {
                                    let w = g[(b * heads + h) * steps + t] * scale;
                                    let kr = krow(b, t, h);
                                    for j in 0..dk {
                                        gk[kr + j] += w * qv[(b * heads + h) * dk + j];
                                    }
                                }
                            }
                        }
                    }
                }
                &Op::WeightedSum {
                    a,
                    v,
                    batch,
                    heads,
                    steps,
                    dim,
                } => {
                    let (av, vv) = (val(a).to_vec(), val(v).to_vec());
                    if let Some(ga) = slot(&mut grads, &nodes, a) {
                        for b in 0..batch {
                            for h in 0..heads {
                                let grow = &g[(b * heads + h) * dim..(b * heads + h + 1) * dim];
                                for t in 0..steps {
                                    let vrow =
                                        &vv[(b * steps + t) * dim..(b * steps + t + 1) * dim];
                                    ga[(b * heads + h) * steps + t] +=
                                        grow.iter().zip(vrow).map(|(x, y)| *x * *y).sum();
                                }
                            }
                        }
                    }
                    if let Some(gv) = slot(&mut grads, &nodes, v) {
                        for b in 0..batch {
                            for h in 0..heads {
                                let grow = &g[(b * heads + h) * dim..(b * heads + h + 1) * dim];
                                for t in 0..steps {
                                    let w = av[(b * heads + h) * steps + t];
                                    let vrow =
                                        &mut gv[(b * steps + t) * dim..(b * steps + t + 1) * dim];
                                    vrow.iter_mut().zip(grow).for_each(|(x, y)| *x += w * *y);
                                }
                            }
                        }
                    }
                }
                Op::FocalLoss {
                    logits,
                    labels,
                    gamma,
                    probs,
                    classes,
                } => {
                    if let Some(gz) = slot(&mut grads, &nodes, *logits) {
                        let batch = labels.len();
                        let gamma = gamma.f64();
                        let upstream = g[0].f64() / batch as f64;
                        for (s, &y) in labels.iter().enumerate() {
                            let row = &probs[s * classes..(s + 1) * classes];
                            let p = row[y].f64();
                            let q = 1.0 - p;
                            // p · dL/dp for L = (1 − p)^γ (−ln p)
                            let kink = if q > 0.0 {
                                gamma * p * q.powf(gamma - 1.0) * p.ln()
                            } else {
                                0.0
                            };
                            let coef = upstream * (kink - q.powf(gamma));
                            for j in 0..*classes {
                                let delta = if j == y { 1.0 } else { 0.0 };
                                gz[s * classes + j] += T::of(coef * (delta - row[j].f64()));
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            grads: leaves,
            params: self.params,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter leaf, in registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(v, id)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}
