//! Wengert-list reverse-mode differentiation.
//!
//! Every differentiable operation appends one node to the tape; node ids are
//! therefore already in topological order, and `backward` is a single reverse
//! sweep that visits each recorded op exactly once. One tape per forward
//! pass; tapes share nothing mutable and may run on separate threads.

use super::{group_stats, Grouping, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Conv2d { x: TensorId, w: TensorId, stride: usize, padding: usize },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: Scalar },
    AddChannel { x: TensorId, v: TensorId },
    MulChannel { x: TensorId, v: TensorId },
    Relu { x: TensorId },
    Softmax { x: TensorId },
    LogSoftmax { x: TensorId },
    NllMean { logp: TensorId, labels: Vec<usize> },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    Reshape { x: TensorId },
    GlobalAvgPool { x: TensorId },
    /// Standardization with statistics computed from the input itself;
    /// gradients flow through mean and variance.
    Normalize { x: TensorId, grouping: Grouping, inv_std: Vec<Scalar> },
    /// Standardization against fixed per-channel statistics (EMA / frozen);
    /// the statistics are constants.
    NormalizeFixed { x: TensorId, inv_std: Vec<Scalar> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed differentiable operations.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input that does not need a gradient.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Record an input whose gradient will be accumulated by `backward`.
    pub fn tracked_leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of `id` after `backward`. Nodes not reachable from the loss
    /// (or never differentiated) report zeros.
    pub fn grad(&self, id: TensorId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> TensorId {
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn push_result(&mut self, value: Tensor, op: Op) -> TensorId {
        self.push(value, op, false)
    }

    fn shape2(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        match self.value(id).shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch(format!("{what}: expected rank 2, got {other:?}"))),
        }
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape2(a, "matmul lhs")?;
        let (k2, n) = self.shape2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner extents disagree: {k} vs {k2}"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += av[i * k + p] * bv[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Ok(self.push_result(Tensor::from_op(vec![m, n], out), Op::MatMul { a, b }))
    }

    /// 2-D cross-correlation (no kernel flip). H' = (H + 2p − kh)/stride + 1.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (f, cw, kh, kw) = self.value(w).dims4()?;
        if self.value(x).rank() != 4 || self.value(w).rank() != 4 {
            return Err(Error::ShapeMismatch("conv2d expects rank-4 input and kernel".into()));
        }
        if c != cw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channel mismatch: input {c}, kernel {cw}"
            )));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let xd = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((fi * c + ci) * kh + ky) * kw + kx;
                                    s += xd[xi] * wv[wi];
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        Ok(self.push_result(
            Tensor::from_op(vec![n, f, oh, ow], out),
            Op::Conv2d { x, w, stride, padding },
        ))
    }

    fn elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(Scalar, Scalar) -> Scalar,
        op: Op,
    ) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<Scalar> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push_result(Tensor::from_op(shape, out), op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: TensorId, c: Scalar) -> Result<TensorId> {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("scale by {c}")));
        }
        let out: Vec<Scalar> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push_result(Tensor::from_op(shape, out), Op::Scale { x, c }))
    }

    fn channel_broadcast(
        &mut self,
        x: TensorId,
        v: TensorId,
        f: impl Fn(Scalar, Scalar) -> Scalar,
        op: Op,
    ) -> Result<TensorId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(v).shape() != [c] {
            return Err(Error::ShapeMismatch(format!(
                "per-channel operand must have shape [{c}], got {:?}",
                self.value(v).shape()
            )));
        }
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; xd.len()];
        let mut idx = 0;
        for _n in 0..n {
            for ci in 0..c {
                for _ in 0..h * w {
                    out[idx] = f(xd[idx], vd[ci]);
                    idx += 1;
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push_result(Tensor::from_op(shape, out), op))
    }

    /// x + v\[c\], broadcasting v over batch and spatial dims.
    pub fn add_channel(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.channel_broadcast(x, v, |a, b| a + b, Op::AddChannel { x, v })
    }

    /// x · v\[c\], broadcasting v over batch and spatial dims.
    pub fn mul_channel(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.channel_broadcast(x, v, |a, b| a * b, Op::MulChannel { x, v })
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<Scalar> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push_result(Tensor::from_op(shape, out), Op::Relu { x }))
    }

    /// Row-wise softmax with max subtraction. Rows sum to 1.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, k) = self.shape2(x, "softmax")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &xd[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                out[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                out[i * k + j] /= z;
            }
        }
        Ok(self.push_result(Tensor::from_op(vec![n, k], out), Op::Softmax { x }))
    }

    /// Row-wise log-softmax, the numerically safe path into NLL.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, k) = self.shape2(x, "log_softmax")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &xd[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
            let z: Scalar = row.iter().map(|&v| (v - mx).exp()).sum();
            let log_z = z.ln() + mx;
            for j in 0..k {
                out[i * k + j] = row[j] - log_z;
            }
        }
        Ok(self.push_result(Tensor::from_op(vec![n, k], out), Op::LogSoftmax { x }))
    }

    /// Mean negative log-likelihood of the true labels under row log-probabilities.
    pub fn nll_mean(&mut self, logp: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (n, k) = self.shape2(logp, "nll_mean")?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range 0..{k}")));
        }
        let lp = self.value(logp).data();
        let mut s = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            s -= lp[i * k + y];
        }
        let loss = s / n as Scalar;
        Ok(self.push_result(
            Tensor::scalar(loss),
            Op::NllMean { logp, labels: labels.to_vec() },
        ))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: Scalar = self.value(x).data().iter().sum();
        Ok(self.push_result(Tensor::scalar(s), Op::SumAll { x }))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.value(x).numel();
        let s: Scalar = self.value(x).data().iter().sum();
        Ok(self.push_result(Tensor::scalar(s / n as Scalar), Op::MeanAll { x }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} → {:?} changes element count",
                self.value(x).shape(),
                shape
            )));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push_result(Tensor::from_op(shape.to_vec(), data), Op::Reshape { x }))
    }

    /// N×C×H×W → N×C, averaging over the spatial dims.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        if self.value(x).rank() != 4 {
            return Err(Error::ShapeMismatch("global_avg_pool expects rank 4".into()));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c];
        let area = (h * w) as Scalar;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let s: Scalar = xd[base..base + h * w].iter().sum();
                out[ni * c + ci] = s / area;
            }
        }
        Ok(self.push_result(Tensor::from_op(vec![n, c], out), Op::GlobalAvgPool { x }))
    }

    /// x̂ = (x − μ)/√(σ² + ε) with μ, σ² computed from x over the given
    /// grouping. Gradients flow through the statistics.
    pub fn normalize(&mut self, x: TensorId, grouping: Grouping, eps: Scalar) -> Result<TensorId> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {eps}")));
        }
        let (mean, var) = group_stats(self.value(x), grouping)?;
        let inv_std: Vec<Scalar> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (n, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        let mut idx = 0;
        for ni in 0..n {
            for ci in 0..c {
                let g = grouping.group_of(ni, ci, c);
                for _ in 0..h * w {
                    out[idx] = (xd[idx] - mean[g]) * inv_std[g];
                    idx += 1;
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push_result(
            Tensor::from_op(shape, out),
            Op::Normalize { x, grouping, inv_std },
        ))
    }

    /// x̂ = (x − μ\[c\])/√(σ²\[c\] + ε) against fixed per-channel statistics.
    pub fn normalize_fixed(
        &mut self,
        x: TensorId,
        mean: &[Scalar],
        var: &[Scalar],
        eps: Scalar,
    ) -> Result<TensorId> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {eps}")));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "fixed statistics length {}/{} for {c} channels",
                mean.len(),
                var.len()
            )));
        }
        if let Some(&v) = var.iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!("negative variance {v}")));
        }
        let inv_std: Vec<Scalar> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        let mut idx = 0;
        for _n in 0..n {
            for ci in 0..c {
                for _ in 0..h * w {
                    out[idx] = (xd[idx] - mean[ci]) * inv_std[ci];
                    idx += 1;
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push_result(Tensor::from_op(shape, out), Op::NormalizeFixed { x, inv_std }))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Accumulates gradients for every
    /// node; leaves not reachable from the loss end up with zeros.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let out_grad = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(i, &out_grad)?;
            self.grads[i] = Some(out_grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: &[Scalar]) {
        let g = self.grads[id.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape()));
        for (gi, di) in g.data_mut().iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn apply_backward(&mut self, node: usize, out_grad: &Tensor) -> Result<()> {
        let dy = out_grad.data();
        // Each arm computes the input deltas from values already on the tape.
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.shape2(a, "matmul lhs")?;
                let n = self.value(b).shape()[1];
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += dy[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += av[i * k + p] * dy[i * n + j];
                        }
                        db[p * n + j] = s;
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Conv2d { x, w, stride, padding } => {
                let (x, w, stride, padding) = (*x, *w, *stride, *padding);
                let (n, c, h, wd) = self.value(x).dims4()?;
                let (f, _, kh, kw) = self.value(w).dims4()?;
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (wd + 2 * padding - kw) / stride + 1;
                let xd = self.value(x).data().to_vec();
                let wv = self.value(w).data().to_vec();
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wv.len()];
                for ni in 0..n {
                    for fi in 0..f {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = dy[((ni * f + fi) * oh + oy) * ow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix =
                                                (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((ni * c + ci) * h + iy as usize) * wd
                                                + ix as usize;
                                            let wi = ((fi * c + ci) * kh + ky) * kw + kx;
                                            dx[xi] += g * wv[wi];
                                            dw[wi] += g * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, dy);
                self.accumulate(b, dy);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let neg: Vec<Scalar> = dy.iter().map(|&g| -g).collect();
                self.accumulate(a, dy);
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                let da: Vec<Scalar> = dy.iter().zip(&bv).map(|(&g, &v)| g * v).collect();
                let db: Vec<Scalar> = dy.iter().zip(&av).map(|(&g, &v)| g * v).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<Scalar> = dy.iter().map(|&g| g * c).collect();
                self.accumulate(x, &dx);
            }
            Op::AddChannel { x, v } => {
                let (x, v) = (*x, *v);
                let (n, c, h, w) = self.value(x).dims4()?;
                let mut dv = vec![0.0; c];
                let mut idx = 0;
                for _n in 0..n {
                    for ci in 0..c {
                        for _ in 0..h * w {
                            dv[ci] += dy[idx];
                            idx += 1;
                        }
                    }
                }
                self.accumulate(x, dy);
                self.accumulate(v, &dv);
            }
            Op::MulChannel { x, v } => {
                let (x, v) = (*x, *v);
                let (n, c, h, w) = self.value(x).dims4()?;
                let xd = self.value(x).data().to_vec();
                let vd = self.value(v).data().to_vec();
                let mut dx = vec![0.0; xd.len()];
                let mut dv = vec![0.0; c];
                let mut idx = 0;
                for _n in 0..n {
                    for ci in 0..c {
                        for _ in 0..h * w {
                            dx[idx] = dy[idx] * vd[ci];
                            dv[ci] += dy[idx] * xd[idx];
                            idx += 1;
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(v, &dv);
            }
            Op::Relu { x } => {
                let x = *x;
                let xd = self.value(x).data().to_vec();
                let dx: Vec<Scalar> = dy
                    .iter()
                    .zip(&xd)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Softmax { x } => {
                let x = *x;
                let s = self.nodes[node].value.data().to_vec();
                let (n, k) = self.shape2(x, "softmax")?;
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let row_s = &s[i * k..(i + 1) * k];
                    let row_g = &dy[i * k..(i + 1) * k];
                    let dot: Scalar = row_s.iter().zip(row_g).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        dx[i * k + j] = row_s[j] * (row_g[j] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LogSoftmax { x } => {
                let x = *x;
                let logp = self.nodes[node].value.data().to_vec();
                let (n, k) = self.shape2(x, "log_softmax")?;
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let gsum: Scalar = dy[i * k..(i + 1) * k].iter().sum();
                    for j in 0..k {
                        dx[i * k + j] = dy[i * k + j] - logp[i * k + j].exp() * gsum;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::NllMean { logp, labels } => {
                let logp = *logp;
                let labels = labels.clone();
                let (n, k) = self.shape2(logp, "nll_mean")?;
                let g = dy[0];
                let mut dx = vec![0.0; n * k];
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * k + y] = -g / n as Scalar;
                }
                self.accumulate(logp, &dx);
            }
            Op::SumAll { x } => {
                let x = *x;
                let g = dy[0];
                let dx = vec![g; self.value(x).numel()];
                self.accumulate(x, &dx);
            }
            Op::MeanAll { x } => {
                let x = *x;
                let n = self.value(x).numel();
                let g = dy[0] / n as Scalar;
                let dx = vec![g; n];
                self.accumulate(x, &dx);
            }
            Op::Reshape { x } => {
                let x = *x;
                self.accumulate(x, dy);
            }
            Op::GlobalAvgPool { x } => {
                let x = *x;
                let (n, c, h, w) = self.value(x).dims4()?;
                let area = (h * w) as Scalar;
                let mut dx = vec![0.0; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        let g = dy[ni * c + ci] / area;
                        let base = (ni * c + ci) * h * w;
                        for off in 0..h * w {
                            dx[base + off] = g;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Normalize { x, grouping, inv_std } => {
                // dx = inv_std · (dy − mean_g(dy) − x̂ · mean_g(dy·x̂));
                // the correction terms carry the gradient through μ and σ².
                let (x, grouping) = (*x, *grouping);
                let inv_std = inv_std.clone();
                let xhat = self.nodes[node].value.data().to_vec();
                let (n, c, h, w) = self.value(x).dims4()?;
                let (num_groups, group_len) = grouping.layout(n, c, h, w)?;
                let mut s1 = vec![0.0; num_groups];
                let mut s2 = vec![0.0; num_groups];
                let mut idx = 0;
                for ni in 0..n {
                    for ci in 0..c {
                        let g = grouping.group_of(ni, ci, c);
                        for _ in 0..h * w {
                            s1[g] += dy[idx];
                            s2[g] += dy[idx] * xhat[idx];
                            idx += 1;
                        }
                    }
                }
                let m = group_len as Scalar;
                let mut dx = vec![0.0; xhat.len()];
                idx = 0;
                for ni in 0..n {
                    for ci in 0..c {
                        let g = grouping.group_of(ni, ci, c);
                        for _ in 0..h * w {
                            dx[idx] =
                                inv_std[g] * (dy[idx] - s1[g] / m - xhat[idx] * s2[g] / m);
                            idx += 1;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::NormalizeFixed { x, inv_std } => {
                let x = *x;
                let inv_std = inv_std.clone();
                let (n, c, h, w) = self.value(x).dims4()?;
                let mut dx = vec![0.0; dy.len()];
                let mut idx = 0;
                for _n in 0..n {
                    for ci in 0..c {
                        for _ in 0..h * w {
                            dx[idx] = dy[idx] * inv_std[ci];
                            idx += 1;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
        }
        let _ = &self.nodes[node].tracked;
        Ok(())
    }
}
