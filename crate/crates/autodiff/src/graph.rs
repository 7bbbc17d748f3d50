//! The recording tape and its reverse sweep.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{col2im, gemm, im2col, max_pool, ConvGeom};
use crate::par;
use crate::params::{ParamGrads, ParamId, ParamStore, RunningStatUpdate};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalisation.
    pub var: Vec<f64>,
    /// Unbiased variance, the usual input for running estimates.
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    MaxPool { x: Var, arg: Vec<u32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Reshape(Var),
    CosineMatrix { a: Var, b: Var, a_norm: Vec<f64>, b_norm: Vec<f64>, eps: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A tape of tensor operations.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers and a single reverse sweep visits every node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    running_updates: Vec<RunningStatUpdate>,
    no_grad: bool,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only; parameters enter as constants.
    pub fn without_grad() -> Self {
        Self { no_grad: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && !self.no_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Leaf for a stored parameter. Repeated calls with the same id return the
    /// same node, so a parameter used twice accumulates both gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("stored tensor is well formed");
        value.requires_grad = t.requires_grad;
        let v = self.push(value, Op::Leaf, t.requires_grad);
        self.params.insert(id, v);
        v
    }

    pub fn push_running_update(&mut self, update: RunningStatUpdate) {
        self.running_updates.push(update);
    }

    pub fn take_running_updates(&mut self) -> Vec<RunningStatUpdate> {
        std::mem::take(&mut self.running_updates)
    }

    fn as_matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => dim_err(format!("{what} expects a matrix, got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix(a, "matmul")?;
        let (k2, n) = self.as_matrix(b, "matmul")?;
        if k != k2 {
            return dim_err(format!("matmul inner dims {m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `x + b` with `b` broadcast over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.value(b).numel() != d {
            return dim_err(format!("bias of {} for last axis {d}", self.value(b).numel()));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            accumulate(row, &bias);
        }
        out.requires_grad = false;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, c), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Relu(x), needs)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax { x, axis }, needs))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, needs))
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]` plus an
    /// optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, geom, out_ch) = match (self.shape(x), self.shape(w)) {
            ([bsz, c, h, wd], [o, c2, kh, kw]) => {
                if c != c2 {
                    return dim_err(format!("conv2d: input has {c} channels, kernel expects {c2}"));
                }
                if h + 2 * pad < *kh || wd + 2 * pad < *kw {
                    return dim_err(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"));
                }
                if stride == 0 {
                    return dim_err("conv2d: stride must be positive");
                }
                (*bsz, ConvGeom { channels: *c, height: *h, width: *wd, kh: *kh, kw: *kw, stride, pad }, *o)
            }
            (s, k) => return dim_err(format!("conv2d expects 4-d input and kernel, got {s:?} and {k:?}")),
        };
        if let Some(b) = b {
            if self.value(b).numel() != out_ch {
                return dim_err(format!("conv2d: bias of {} for {out_ch} channels", self.value(b).numel()));
            }
        }
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let img_len = geom.channels * geom.height * geom.width;
        let mut cols = vec![0.0; batch * rows * cols_n];
        let mut out = vec![0.0; batch * out_ch * cols_n];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            par::for_each_chunk_pair_mut(&mut out, out_ch * cols_n, &mut cols, rows * cols_n, |i, o, c| {
                im2col(&xs[i * img_len..(i + 1) * img_len], &geom, c);
                gemm(out_ch, rows, cols_n, ws, false, c, false, 0.0, o);
                if let Some(bias) = bias {
                    for (plane, bv) in o.chunks_mut(cols_n).zip(bias) {
                        plane.iter_mut().for_each(|v| *v += bv);
                    }
                }
            });
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        if !needs || self.no_grad {
            cols = Vec::new();
        }
        let t = Tensor::new(&[batch, out_ch, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, needs))
    }

    /// Non-overlapping `k×k` max pooling over `[B, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [b, c, h, w] = *self.shape(x) else {
            return dim_err(format!("max_pool2d expects 4-d input, got {:?}", self.shape(x)));
        };
        if k == 0 || h < k || w < k {
            return dim_err(format!("max_pool2d: window {k} on {h}x{w}"));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![0.0; b * c * oh * ow];
        let mut arg = vec![0u32; out.len()];
        {
            let xs = self.value(x).data();
            par::for_each_chunk_pair_mut(&mut out, c * oh * ow, &mut arg, c * oh * ow, |i, o, a| {
                max_pool(&xs[i * c * h * w..(i + 1) * c * h * w], c, h, w, k, o, a);
            });
        }
        let t = Tensor::new(&[b, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::MaxPool { x, arg }, needs))
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return dim_err(format!("batch norm expects at least 2 axes, got {s:?}"));
        }
        let (b, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return dim_err(format!("batch norm affine params must have {c} entries"));
        }
        Ok((b, c, spatial))
    }

    /// Train-mode batch normalisation over axis 1 of `[B, C, ...]`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, c, spatial) = self.bn_layout(x, gamma, beta)?;
        if b < 2 {
            return Err(Error::DegenerateBatch(b));
        }
        let count = (b * spatial) as f64;
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for n in 0..b {
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = (n * c + ch) * spatial;
                *m += xs[base..base + spatial].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * spatial;
                var[ch] += xs[base..base + spatial].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, b, c, spatial);
        let unbiased_var = var.iter().map(|v| v * count / (count - 1.0)).collect();
        let stats = BatchStats { mean, var, unbiased_var };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let t = Tensor::new(self.shape(x), out)?;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true }, needs);
        Ok((v, stats))
    }

    /// Eval-mode batch normalisation using fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (b, c, spatial) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return dim_err(format!("batch norm statistics must have {c} entries"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, xhat) = self.bn_apply(x, gamma, beta, mean, &inv_std, b, c, spatial);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false }, needs))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], b: usize, c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * spatial;
                for k in base..base + spatial {
                    let h = (xs[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = g[ch] * h + be[ch];
                }
            }
        }
        (out, xhat)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// `[B, ...] -> [B, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let b = *s.first().unwrap_or(&1);
        let rest = s.iter().skip(1).product();
        self.reshape(x, &[b, rest])
    }

    /// Pairwise cosine similarities between the rows of `a: [n, E]` and
    /// `b: [m, E]`; norms are floored at `eps`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (n, e) = self.as_matrix(a, "cosine_matrix")?;
        let (m, e2) = self.as_matrix(b, "cosine_matrix")?;
        if e != e2 {
            return dim_err(format!("cosine_matrix: widths {e} and {e2}"));
        }
        let norms = |t: &Tensor| -> Vec<f64> { t.data().chunks(e).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect() };
        let a_norm = norms(self.value(a));
        let b_norm = norms(self.value(b));
        let mut out = vec![0.0; n * m];
        gemm(n, e, m, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] /= a_norm[i].max(eps) * b_norm[j].max(eps);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::CosineMatrix { a, b, a_norm, b_norm, eps }, needs))
    }

    /// Cosine similarity of two vectors, as a scalar node.
    pub fn cosine_similarity(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        let d = self.value(u).numel();
        let u2 = self.reshape(u, &[1, d])?;
        let d2 = self.value(v).numel();
        let v2 = self.reshape(v, &[1, d2])?;
        let c = self.cosine_matrix(u2, v2, eps)?;
        self.reshape(c, &[])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, false)
    }

    /// As [`Graph::cross_entropy`] on a square score matrix, with each row's
    /// diagonal entry removed from its softmax.
    pub fn cross_entropy_excluding_self(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, targets, true)
    }

    fn cross_entropy_impl(&mut self, logits: Var, targets: &[usize], exclude_diag: bool) -> Result<Var> {
        let (b, n) = self.as_matrix(logits, "cross_entropy")?;
        if targets.len() != b {
            return dim_err(format!("cross_entropy: {} targets for {b} rows", targets.len()));
        }
        if exclude_diag && b != n {
            return dim_err("cross_entropy_excluding_self needs a square matrix");
        }
        let allowed = |i: usize, j: usize| !(exclude_diag && i == j);
        let mut probs = vec![0.0; b * n];
        let mut total = 0.0;
        let src = self.value(logits).data();
        for (i, &t) in targets.iter().enumerate() {
            if t >= n || !allowed(i, t) {
                return Err(Error::Index { index: t, len: n });
            }
            let row = &src[i * n..(i + 1) * n];
            let max = (0..n).filter(|&j| allowed(i, j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..n).filter(|&j| allowed(i, j)) {
                let e = (row[j] - max).exp();
                probs[i * n + j] = e;
                z += e;
            }
            probs[i * n..(i + 1) * n].iter_mut().for_each(|p| *p /= z);
            total += max + z.ln() - row[t];
        }
        let needs = self.needs(logits);
        let t = Tensor::scalar(total / b as f64);
        Ok(self.push(t, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Row-wise one-hot of the argmax in the forward pass, identity in the
    /// backward pass.
    pub fn straight_through(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.as_matrix(x, "straight_through")?;
        let mut out = vec![0.0; r * c];
        for (i, row) in self.value(x).data().chunks(c).enumerate() {
            out[i * c + crate::argmax(row)] = 1.0;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::StraightThrough(x), needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, self.value(*b).data(), true, 1.0, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, self.value(*a).data(), true, g, false, 1.0, db);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = self.slot(grads, *x) {
                    accumulate(dx, g);
                }
                let d = self.value(*b).numel();
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(d) {
                        accumulate(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        accumulate(d, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, y))| *d += g * y);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, x))| *d += g * x);
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, g), v) in dx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis).expect("validated in forward");
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis).expect("validated in forward");
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let total: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => self.conv_backward(*x, *w, *b, geom, cols, g, grads),
            Op::MaxPool { x, arg } => {
                let s = self.shape(*x);
                let per_img = s[1] * s[2] * s[3];
                let per_out = arg.len() / s[0];
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, (gs, args)) in g.chunks(per_out).zip(arg.chunks(per_out)).enumerate() {
                        let img = &mut dx[i * per_img..(i + 1) * per_img];
                        for (gv, &a) in gs.iter().zip(args) {
                            img[a as usize] += gv;
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = self.shape(*x);
                let (b, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for n in 0..b {
                    for ch in 0..c {
                        let base = (n * c + ch) * spatial;
                        for k in base..base + spatial {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gamma) {
                    accumulate(dg, &sum_gx);
                }
                if let Some(db) = self.slot(grads, *beta) {
                    accumulate(db, &sum_g);
                }
                let gam = self.value(*gamma).data().to_vec();
                if let Some(dx) = self.slot(grads, *x) {
                    let count = (b * spatial) as f64;
                    for n in 0..b {
                        for ch in 0..c {
                            let base = (n * c + ch) * spatial;
                            let scale = gam[ch] * inv_std[ch];
                            for k in base..base + spatial {
                                dx[k] += if *train {
                                    scale * (g[k] - sum_g[ch] / count - xhat[k] * sum_gx[ch] / count)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    accumulate(dx, g);
                }
            }
            Op::CosineMatrix { a, b, a_norm, b_norm, eps } => {
                let (n, e) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                let cos = node.value.data();
                let mut scaled = vec![0.0; n * m];
                let mut row_gc = vec![0.0; n];
                let mut col_gc = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let k = i * m + j;
                        scaled[k] = g[k] / (a_norm[i].max(*eps) * b_norm[j].max(*eps));
                        row_gc[i] += g[k] * cos[k];
                        col_gc[j] += g[k] * cos[k];
                    }
                }
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    gemm(n, m, e, &scaled, false, bv, false, 1.0, da);
                    for i in 0..n {
                        if a_norm[i] > *eps {
                            let f = row_gc[i] / (a_norm[i] * a_norm[i]);
                            for t in 0..e {
                                da[i * e + t] -= f * av[i * e + t];
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(m, n, e, &scaled, true, av, false, 1.0, db);
                    for j in 0..m {
                        if b_norm[j] > *eps {
                            let f = col_gc[j] / (b_norm[j] * b_norm[j]);
                            for t in 0..e {
                                db[j * e + t] -= f * bv[j * e + t];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let b = targets.len();
                let n = probs.len() / b;
                if let Some(dl) = self.slot(grads, *logits) {
                    let scale = g[0] / b as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[i * n + j] += scale * (probs[i * n + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let f = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += f);
                }
            }
            Op::StraightThrough(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    accumulate(dx, g);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, cols: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let batch = self.shape(x)[0];
        let out_ch = self.shape(w)[0];
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let img_len = geom.channels * geom.height * geom.width;
        let out_len = out_ch * ncols;
        if let Some(b) = b {
            if let Some(db) = self.slot(grads, b) {
                for img in g.chunks(out_len) {
                    for (o, plane) in img.chunks(ncols).enumerate() {
                        db[o] += plane.iter().sum::<f64>();
                    }
                }
            }
        }
        if self.needs(w) {
            let mut partial = vec![0.0; batch * out_ch * rows];
            par::for_each_chunk_mut(&mut partial, out_ch * rows, |i, p| {
                gemm(out_ch, ncols, rows, &g[i * out_len..(i + 1) * out_len], false, &cols[i * rows * ncols..(i + 1) * rows * ncols], true, 0.0, p);
            });
            let dw = self.slot(grads, w).expect("weight needs grad");
            for p in partial.chunks(out_ch * rows) {
                accumulate(dw, p);
            }
        }
        let ws = self.value(w).data();
        if let Some(dx) = self.slot(grads, x) {
            par::for_each_chunk_mut(dx, img_len, |i, img| {
                let mut dcols = vec![0.0; rows * ncols];
                gemm(rows, out_ch, ncols, ws, true, &g[i * out_len..(i + 1) * out_len], false, 0.0, &mut dcols);
                col2im(&dcols, geom, img);
            });
        }
    }

    /// Gradients of every parameter leaf touched by this graph.
    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let mut entries: Vec<(ParamId, Vec<f64>)> = self
            .params
            .iter()
            .filter_map(|(id, v)| grads.get(*v).map(|g| (*id, g.to_vec())))
            .collect();
        entries.sort_by_key(|(id, _)| *id);
        ParamGrads { entries }
    }
}
