//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it executes. Node ids are handed out
//! in execution order, so walking ids in reverse is a valid topological order
//! for the backward sweep: when node `i` is visited, every consumer (all with
//! ids `> i`) has already pushed its contribution into `i`'s gradient.
//!
//! Broadcasting is limited to one-element operands in `add`/`sub`/`mul`, plus
//! the explicit row-bias op [`Graph::add_bias`].

use crate::kernels::{self, ConvGeom};
use crate::tensor::{split_axis, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    LogSumExp { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    CrossEntropySoft { logits: Var, target: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Filterbank { params: Var, k: usize, size: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution record of one forward pass. Not shared across threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_of_axis_removed(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

fn logsumexp_rows(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| data[(o * n + k) * inner + i];
            let m = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..n).map(|k| (at(k) - m).exp()).sum();
            out[o * inner + i] = m + s.ln();
        }
    }
    out
}

fn softmax_rows(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let lse = logsumexp_rows(data, shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let l = lse[o * inner + i];
            for k in 0..n {
                let idx = (o * n + k) * inner + i;
                out[idx] = (data[idx] - l).exp();
            }
        }
    }
    out
}

/// Row-normalised Gaussian filterbank, one row per grid point.
/// `params = [center, log_stride, log_variance]`, center in `[-1, 1]` image units.
pub(crate) fn filterbank_values(params: &[f64], k: usize, size: usize) -> Vec<f64> {
    let (mu, inv_var) = filterbank_geometry(params, k, size);
    let mut out = vec![0.0; k * size];
    for i in 0..k {
        let row = &mut out[i * size..(i + 1) * size];
        for (a, r) in row.iter_mut().enumerate() {
            let d = a as f64 - mu[i];
            *r = -0.5 * d * d * inv_var;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            z += *r;
        }
        for r in row.iter_mut() {
            *r /= z;
        }
    }
    out
}

fn filterbank_geometry(params: &[f64], k: usize, size: usize) -> (Vec<f64>, f64) {
    let half = (size as f64 - 1.0) / 2.0;
    let center = half * (params[0] + 1.0);
    let base = if k > 1 {
        (size as f64 - 1.0) / (k as f64 - 1.0)
    } else {
        1.0
    };
    let stride = base * params[1].exp();
    let inv_var = (-params[2]).exp();
    let mid = (k as f64 - 1.0) / 2.0;
    let mu = (0..k).map(|i| center + (i as f64 - mid) * stride).collect();
    (mu, inv_var)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient written by the last [`Graph::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.value(b).numel() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(TensorError::mismatch(op, sa, sb))
        }
    }

    fn zip_with(&self, a: Var, b: Var, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data = (0..n).map(|i| f(pick(da, i), pick(db, i))).collect();
        Tensor::new(shape, data).expect("broadcast shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.binary_shape("add", a, b)?;
        let v = self.zip_with(a, b, shape, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.binary_shape("sub", a, b)?;
        let v = self.zip_with(a, b, shape, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.binary_shape("mul", a, b)?;
        let v = self.zip_with(a, b, shape, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scalar_mul(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::ScalarMul(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// `x[.., n] + b[n]`, the bias broadcast over every leading index.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(TensorError::mismatch("add_bias", sx, sb));
        }
        let n = sb[0];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bias[i % n];
        }
        Ok(self.push(v, Op::AddBias(x, b), &[x, b]))
    }

    /// `x[B, C, ..] + b[C]`, one bias per channel.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(TensorError::mismatch("add_channel_bias", sx, sb));
        }
        let (_, c, inner) = split_axis(sx, 1);
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bias[(i / inner) % c];
        }
        Ok(self.push(v, Op::AddChannelBias(x, b), &[x, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", &sa, &sb));
        }
        let data = kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            sa[0],
            sa[1],
            sb[1],
        );
        let v = Tensor::new(vec![sa[0], sb[1]], data)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Zero-padded 2-D convolution. `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let (h, wd) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if h < sw[2] || wd < sw[3] {
            return Err(TensorError::mismatch("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            out_h: (h - sw[2]) / stride + 1,
            out_w: (wd - sw[3]) / stride + 1,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let data = kernels::conv2d(self.value(x).data(), self.value(w).data(), &geom);
        let v = Tensor::new(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], data)?;
        Ok(self.push(v, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Transposed convolution. `x: [B, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`;
    /// output side is `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(TensorError::mismatch("conv_transpose2d", &sx, &sw));
        }
        let full_h = (sx[2] - 1) * stride + sw[2];
        let full_w = (sx[3] - 1) * stride + sw[3];
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(TensorError::mismatch("conv_transpose2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[1],
            out_h: full_h - 2 * pad,
            out_w: full_w - 2 * pad,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let data = kernels::conv_transpose2d(self.value(x).data(), self.value(w).data(), &geom);
        let v = Tensor::new(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], data)?;
        Ok(self.push(v, Op::ConvTranspose2d { x, w, geom }, &[x, w]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::invalid(
                "ln",
                "argument must be strictly positive",
            ));
        }
        Ok(self.unary(x, f64::ln, Op::Ln(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Max-shifted `ln(sum(exp(x)))` along `axis`; the axis is removed.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        check_axis("logsumexp", &shape, axis)?;
        let data = logsumexp_rows(self.value(x).data(), &shape, axis);
        let v = Tensor::new(shape_of_axis_removed(&shape, axis), data)?;
        Ok(self.push(v, Op::LogSumExp { x, axis }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let data = softmax_rows(self.value(x).data(), &shape, axis);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        check_axis("log_softmax", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let lse = logsumexp_rows(self.value(x).data(), &shape, axis);
        let mut v = self.value(x).clone();
        let d = v.data_mut();
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    d[(o * n + k) * inner + i] -= lse[o * inner + i];
                }
            }
        }
        Ok(self.push(v, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// `-sum_k target[.., k] * log_softmax(logits)[.., k]` over the last axis.
    pub fn cross_entropy_soft(&mut self, logits: Var, target: Var) -> Result<Var, TensorError> {
        let (sl, st) = (self.shape(logits).to_vec(), self.shape(target).to_vec());
        if sl != st || sl.is_empty() {
            return Err(TensorError::mismatch("cross_entropy_soft", &sl, &st));
        }
        let axis = sl.len() - 1;
        let n = sl[axis];
        let lse = logsumexp_rows(self.value(logits).data(), &sl, axis);
        let (ld, td) = (self.value(logits).data(), self.value(target).data());
        let data: Vec<f64> = lse
            .iter()
            .enumerate()
            .map(|(r, l)| (0..n).map(|k| -td[r * n + k] * (ld[r * n + k] - l)).sum())
            .collect();
        let v = Tensor::new(sl[..axis].to_vec(), data)?;
        Ok(self.push(
            v,
            Op::CrossEntropySoft { logits, target },
            &[logits, target],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid(
                "transpose",
                format!("expected a matrix, got {s:?}"),
            ));
        }
        let data = kernels::transpose(self.value(x).data(), s[0], s[1]);
        let v = Tensor::new(vec![s[1], s[0]], data)?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "nothing to concatenate"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rest = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                let d = self.value(*p).data();
                data.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!(
                    "range {start}..{} outside axis {axis} of {shape:?}",
                    start + len
                ),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    /// Gaussian attention filterbank `[k, size]` from a `[3]` parameter vector
    /// `(center in [-1,1], log stride scale, log variance)`. Rows sum to one.
    pub fn filterbank(&mut self, params: Var, k: usize, size: usize) -> Result<Var, TensorError> {
        if self.shape(params) != [3] || k == 0 || size == 0 {
            return Err(TensorError::mismatch(
                "filterbank",
                self.shape(params),
                &[3],
            ));
        }
        let data = filterbank_values(self.value(params).data(), k, size);
        let v = Tensor::new(vec![k, size], data)?;
        Ok(self.push(v, Op::Filterbank { params, k, size }, &[params]))
    }

    /// Reverse sweep from a one-element `root`. Overwrites gradients from any
    /// previous call; afterwards [`Graph::grad`] holds d root / d v for every
    /// node that requires grad and is reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; n];
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        pending[root.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut pending)?;
            let shape = self.nodes[id].value.shape().to_vec();
            self.grads[id] = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    fn propagate(
        &self,
        id: usize,
        g: &[f64],
        pending: &mut [Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        let nodes = &self.nodes;
        let y = nodes[id].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = pending[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        // Gradient for an operand that may have been broadcast from one element.
        let fold = |slot: &mut [f64], g: &[f64], scale: &dyn Fn(usize) -> f64| {
            if slot.len() == 1 && g.len() != 1 {
                slot[0] += (0..g.len()).map(|i| g[i] * scale(i)).sum::<f64>();
            } else {
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += g[i] * scale(i);
                }
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| fold(s, g, &|_| 1.0));
                acc(*b, &mut |s| fold(s, g, &|_| 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| fold(s, g, &|_| 1.0));
                acc(*b, &mut |s| fold(s, g, &|_| -1.0));
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                acc(*a, &mut |s| fold(s, g, &|i| pick(db, i)));
                acc(*b, &mut |s| fold(s, g, &|i| pick(da, i)));
            }
            Op::ScalarMul(x, c) => acc(*x, &mut |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi * c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |s| {
                for (si, gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            }),
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
                acc(*b, &mut |s| {
                    let n = s.len();
                    for (i, gi) in g.iter().enumerate() {
                        s[i % n] += gi;
                    }
                });
            }
            Op::AddChannelBias(x, b) => {
                let (_, c, inner) = split_axis(nodes[x.0].value.shape(), 1);
                acc(*x, &mut |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                });
                acc(*b, &mut |s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[(i / inner) % c] += gi;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].requires_grad {
                    let bt = kernels::transpose(val(*b), k, n);
                    let ga = kernels::matmul(g, &bt, m, n, k);
                    acc(*a, &mut |s| {
                        s.iter_mut().zip(&ga).for_each(|(si, v)| *si += v)
                    });
                }
                if nodes[b.0].requires_grad {
                    let at = kernels::transpose(val(*a), m, k);
                    let gb = kernels::matmul(&at, g, k, m, n);
                    acc(*b, &mut |s| {
                        s.iter_mut().zip(&gb).for_each(|(si, v)| *si += v)
                    });
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    geom,
                    nodes[x.0].requires_grad,
                    nodes[w.0].requires_grad,
                );
                acc(*x, &mut |s| {
                    s.iter_mut().zip(&dx).for_each(|(si, v)| *si += v)
                });
                acc(*w, &mut |s| {
                    s.iter_mut().zip(&dw).for_each(|(si, v)| *si += v)
                });
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (dx, dw) = kernels::conv_transpose2d_backward(
                    val(*x),
                    val(*w),
                    g,
                    geom,
                    nodes[x.0].requires_grad,
                    nodes[w.0].requires_grad,
                );
                acc(*x, &mut |s| {
                    s.iter_mut().zip(&dx).for_each(|(si, v)| *si += v)
                });
                acc(*w, &mut |s| {
                    s.iter_mut().zip(&dw).for_each(|(si, v)| *si += v)
                });
            }
            Op::Relu(x) => {
                let xd = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if xd[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Sigmoid(x) => acc(*x, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            }),
            Op::Ln(x) => {
                let xd = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / xd[i];
                    }
                })
            }
            Op::Square(x) => {
                let xd = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * g[i] * xd[i];
                    }
                })
            }
            Op::LogSumExp { x, axis } => {
                let shape = nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let sm = softmax_rows(val(*x), shape, *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                let idx = (o * n + k) * inner + i;
                                s[idx] += g[o * inner + i] * sm[idx];
                            }
                        }
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                s[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let total: f64 = (0..n).map(|k| g[at(k)]).sum();
                            for k in 0..n {
                                s[at(k)] += g[at(k)] - y[at(k)].exp() * total;
                            }
                        }
                    }
                })
            }
            Op::CrossEntropySoft { logits, target } => {
                let shape = nodes[logits.0].value.shape();
                let axis = shape.len() - 1;
                let n = shape[axis];
                let ld = val(*logits);
                let td = val(*target);
                let lse = logsumexp_rows(ld, shape, axis);
                acc(*logits, &mut |s| {
                    for (r, gr) in g.iter().enumerate() {
                        let tsum: f64 = td[r * n..(r + 1) * n].iter().sum();
                        for k in 0..n {
                            let idx = r * n + k;
                            let p = (ld[idx] - lse[r]).exp();
                            s[idx] += gr * (p * tsum - td[idx]);
                        }
                    }
                });
                acc(*target, &mut |s| {
                    for (r, gr) in g.iter().enumerate() {
                        for k in 0..n {
                            let idx = r * n + k;
                            s[idx] -= gr * (ld[idx] - lse[r]);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|si| *si += g[0])),
            Op::Mean(x) => acc(*x, &mut |s| {
                let scale = g[0] / s.len() as f64;
                s.iter_mut().for_each(|si| *si += scale)
            }),
            Op::Transpose(x) => {
                let sx = nodes[x.0].value.shape();
                let gt = kernels::transpose(g, sx[1], sx[0]);
                acc(*x, &mut |s| {
                    s.iter_mut().zip(&gt).for_each(|(si, v)| *si += v)
                });
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[id].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.shape()[*axis];
                    acc(*p, &mut |s| {
                        for o in 0..outer {
                            let src =
                                &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (si, v) in s[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src)
                            {
                                *si += v;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let len = nodes[id].value.shape()[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (si, v) in dst
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *si += v;
                        }
                    }
                })
            }
            Op::Filterbank { params, k, size } => {
                let p = val(*params);
                let (mu, inv_var) = filterbank_geometry(p, *k, *size);
                let half = (*size as f64 - 1.0) / 2.0;
                let base = if *k > 1 {
                    (*size as f64 - 1.0) / (*k as f64 - 1.0)
                } else {
                    1.0
                };
                let stride = base * p[1].exp();
                let mid = (*k as f64 - 1.0) / 2.0;
                let (mut d_center, mut d_logstride, mut d_logvar) = (0.0, 0.0, 0.0);
                for i in 0..*k {
                    let row = &y[i * size..(i + 1) * size];
                    let grow = &g[i * size..(i + 1) * size];
                    let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let mut d_mu = 0.0;
                    for a in 0..*size {
                        // d loss / d exponent for the softmax over pixel positions.
                        let de = row[a] * (grow[a] - dot);
                        let d = a as f64 - mu[i];
                        d_mu += de * d * inv_var;
                        d_logvar += de * 0.5 * d * d * inv_var;
                    }
                    d_center += d_mu * half;
                    d_logstride += d_mu * (i as f64 - mid) * stride;
                }
                acc(*params, &mut |s| {
                    s[0] += d_center;
                    s[1] += d_logstride;
                    s[2] += d_logvar;
                });
            }
        }
        Ok(())
    }

    /// Gradient of a scalar with respect to `input` alone.
    ///
    /// Returns the gradient and `true`, or a zero tensor and `false` when
    /// `input` does not feed `scalar`. Parameter tensors live outside the graph,
    /// so nothing about them changes here.
    pub fn grad_wrt_input(
        &mut self,
        scalar: Var,
        input: Var,
    ) -> Result<(Tensor, bool), TensorError> {
        self.backward(scalar)?;
        match self.grad(input) {
            Some(g) => Ok((g.clone(), true)),
            None => {
                log::warn!(
                    "grad_wrt_input: input node {} is disconnected from the scalar",
                    input.0
                );
                Ok((Tensor::zeros(self.value(input).shape()), false))
            }
        }
    }
}
