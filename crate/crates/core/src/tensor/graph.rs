use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{self, Conv2dSpec};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `b` tiled over the leading axes of `a`.
    AddTiled(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    LayerNorm { x: Var, gain: Var, offset: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Gelu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    PrependToken { x: Var, token: Var },
    SelectToken { x: Var, index: usize },
    AffineLastDim { x: Var, scale: Vec<f64> },
    MseLoss { pred: Var, target: Vec<f64> },
    CrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Parameters are recorded by reference so a forward
/// pass never copies model weights.
///
/// Every op checks its output for NaN/Inf and reports the current scope
/// (see [`Graph::set_scope`]) on failure.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    scope: String,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Statistics used by [`Graph::batch_norm`].
pub enum BatchNormStats<'s> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'s [f64], var: &'s [f64] },
}

/// Batch statistics observed during a training-mode batch norm: per-channel
/// mean and unbiased variance.
pub struct ObservedStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (numel(shape) / last.max(1), last)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names the layer being built; used in non-finite error reports.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    /// Records a borrowed leaf. Gradients flow to it when the tensor
    /// requires them.
    pub fn input(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("graph nodes always hold consistent shapes")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            other => Err(Error::shape("scalar", format!("expected one value, got {}", other.len()))),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: name,
                layer: self.scope.clone(),
            });
        }
        let requires_grad = parents.iter().any(|&p| self.rg(p));
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, c), &[x])
    }

    /// `a + b` where `b`'s shape equals a trailing slice of `a`'s shape.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_tiled", format!("cannot tile {sb:?} over {sa:?}")));
        }
        let bv = self.value(b);
        let n = bv.len();
        let out = self.value(a).iter().enumerate().map(|(i, &v)| v + bv[i % n]).collect();
        let shape = sa.to_vec();
        self.push("add_tiled", shape, out, Op::AddTiled(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape, out, Op::Reshape(x), &[x])
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x), &shape, perm);
        self.push("permute", out_shape, out, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Affine map over the last axis: `x · wᵀ + b` with `w` shaped `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let (dout, din) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear", format!("bias {:?}, expected [{dout}]", self.shape(b))));
            }
        }
        let rows = numel(&xs) / din;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            let xr = &xv[r * din..(r + 1) * din];
            let orow = &mut out[r * dout..(r + 1) * dout];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wr = &wv[o * din..(o + 1) * din];
                *slot = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            out.chunks_mut(dout).for_each(|row| row.iter_mut().zip(bv).for_each(|(o, b)| *o += b));
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("linear", shape, out, Op::Linear { x, w, b }, &parents)
    }

    /// Batched matrix product over matching leading axes:
    /// `[.., m, k] × [.., k, n] → [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let out = matmul_nn(self.value(a), self.value(b), batch, m, k, n);
        let mut shape = sa;
        shape[r - 1] = n;
        self.push("matmul", shape, out, Op::MatMul { a, b, batch, m, k, n }, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &Conv2dSpec) -> Result<Var> {
        let dims = conv::check_shapes(spec, self.shape(x), self.shape(w), b.map(|b| self.shape(b)))?;
        let out = conv::forward(spec, &dims, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let shape = vec![dims.batch, spec.out_channels, dims.out_h, dims.out_w];
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("conv2d", shape, out, Op::Conv2d { x, w, b, spec: *spec }, &parents)
    }

    /// Per-channel normalization of a `[B, C, H, W]` input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: BatchNormStats<'_>,
    ) -> Result<(Var, Option<ObservedStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::shape("batch_norm", format!("input {s:?}, gamma {:?}", self.shape(gamma))));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("batch_norm eps must be positive, got {eps}")));
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        let count = b * plane;
        let xv = self.value(x);
        let channel_iter = |ch: usize| (0..b).flat_map(move |bi| {
            let base = (bi * c + ch) * plane;
            base..base + plane
        });
        let (mean, var, observed) = match stats {
            BatchNormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let m = channel_iter(ch).map(|i| xv[i]).sum::<f64>() / count as f64;
                    let v = channel_iter(ch).map(|i| (xv[i] - m).powi(2)).sum::<f64>() / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1 { v * count as f64 / (count - 1) as f64 } else { *v })
                    .collect();
                let observed = ObservedStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(observed))
            }
            BatchNormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics do not match channels"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (&xi, (h, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / plane) % c;
            *h = (xi - mean[ch]) * inv_std[ch];
            *o = gv[ch] * *h + bv[ch];
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: observed.is_some(),
        };
        let v = self.push("batch_norm", s, out, op, &[x, gamma, beta])?;
        Ok((v, observed))
    }

    /// Normalization over the last axis followed by `gain * x̂ + offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, d) = split_last(&s);
        if self.shape(gain) != [d] || self.shape(offset) != [d] {
            return Err(Error::shape("layer_norm", format!("input {s:?}, gain {:?}", self.shape(gain))));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let ov = self.value(offset);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - m) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + ov[j];
            }
        }
        self.push("layer_norm", s, out, Op::LayerNorm { x, gain, offset, xhat, inv_std }, &[x, gain, offset])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let mut out = self.value(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        self.push("softmax", s, out, Op::Softmax { x, axis }, &[x])
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * std_normal_cdf(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu(x), &[x])
    }

    /// Inverted dropout. In evaluation mode the input passes through
    /// untouched; in training mode each element is kept with probability
    /// `1 - p` and survivors are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), p, seed);
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push("dropout", shape, out, Op::Dropout { x, mask }, &[x])
    }

    /// `[B, N, D]` and a `[D]` token → `[B, N + 1, D]` with the token first.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(token) != [s[2]] {
            return Err(Error::shape("prepend_token", format!("input {s:?}, token {:?}", self.shape(token))));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let tv = self.value(token);
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(tv);
            out.extend_from_slice(&xv[bi * n * d..(bi + 1) * n * d]);
        }
        self.push("prepend_token", vec![b, n + 1, d], out, Op::PrependToken { x, token }, &[x, token])
    }

    /// `[B, N, D]` → `[B, D]`, taking sequence position `index`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::shape("select_token", format!("index {index} for {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let start = (bi * n + index) * d;
            out.extend_from_slice(&xv[start..start + d]);
        }
        self.push("select_token", vec![b, d], out, Op::SelectToken { x, index }, &[x])
    }

    /// `x * scale + shift` per position of the last axis, with fixed
    /// (non-trainable) coefficients.
    pub fn affine_last_dim(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (_, d) = split_last(&s);
        if scale.len() != d || shift.len() != d {
            return Err(Error::shape("affine_last_dim", format!("{d} features, {} coefficients", scale.len())));
        }
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * scale[i % d] + shift[i % d])
            .collect();
        self.push("affine_last_dim", s, out, Op::AffineLastDim { x, scale: scale.to_vec() }, &[x])
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        if target.len() != self.value(pred).len() {
            return Err(Error::shape(
                "mse_loss",
                format!("prediction {:?} vs {} targets", self.shape(pred), target.len()),
            ));
        }
        let pv = self.value(pred);
        let loss = pv.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pv.len() as f64;
        self.push("mse_loss", vec![1], vec![loss], Op::MseLoss { pred, target: target.to_vec() }, &[pred])
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::shape("cross_entropy", format!("logits {s:?}, {} labels", labels.len())));
        }
        let (b, k) = (s[0], s[1]);
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &lv[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / z;
            }
            loss -= row[labels[r]] - max - z.ln();
        }
        loss /= b as f64;
        let op = Op::CrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        self.push("cross_entropy", vec![1], vec![loss], op, &[logits])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::AddTiled(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut d = vec![0.0; n];
                    g.iter().enumerate().for_each(|(i, v)| d[i % n] += v);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                perm.iter().enumerate().for_each(|(i, &p)| inverse[p] = i);
                let d = permute_data(g, &node.shape, &inverse);
                self.accumulate(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let rows = g.len() / dout;
                if self.rg(*x) {
                    let wv = self.value(*w);
                    let mut dx = vec![0.0; rows * din];
                    for r in 0..rows {
                        let dxr = &mut dx[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let go = g[r * dout + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv[o * din..(o + 1) * din];
                            dxr.iter_mut().zip(wr).for_each(|(d, w)| *d += go * w);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let xv = self.value(*x);
                    let mut dw = vec![0.0; dout * din];
                    for r in 0..rows {
                        let xr = &xv[r * din..(r + 1) * din];
                        for o in 0..dout {
                            let go = g[r * dout + o];
                            if go == 0.0 {
                                continue;
                            }
                            let dwr = &mut dw[o * din..(o + 1) * din];
                            dwr.iter_mut().zip(xr).for_each(|(d, x)| *d += go * x);
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; dout];
                        g.chunks(dout).for_each(|row| db.iter_mut().zip(row).for_each(|(d, v)| *d += v));
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if self.rg(*a) {
                    // dA = dY · Bᵀ
                    let bt = transpose_batched(self.value(*b), batch, k, n);
                    self.accumulate(grads, *a, matmul_nn(g, &bt, batch, m, n, k));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dY
                    let at = transpose_batched(self.value(*a), batch, m, k);
                    self.accumulate(grads, *b, matmul_nn(&at, g, batch, k, m, n));
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let dims = conv::check_shapes(spec, self.shape(*x), self.shape(*w), None)
                    .expect("shapes validated in forward");
                if self.rg(*x) {
                    let d = conv::backward_input(spec, &dims, g, self.value(*w));
                    self.accumulate(grads, *x, d);
                }
                if self.rg(*w) {
                    let d = conv::backward_weight(spec, &dims, g, self.value(*x));
                    self.accumulate(grads, *w, d);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, conv::backward_bias(spec, &dims, g));
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = &node.shape;
                let (bsz, c, plane) = (s[0], s[1], s[2] * s[3]);
                let chan = |i: usize| (i / plane) % c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    dgamma[chan(i)] += gi * xhat[i];
                    dbeta[chan(i)] += gi;
                }
                if self.rg(*x) {
                    let gv = self.value(*gamma);
                    let mut dx = vec![0.0; g.len()];
                    if *batch_stats {
                        let count = (bsz * plane) as f64;
                        for (i, d) in dx.iter_mut().enumerate() {
                            let ch = chan(i);
                            *d = gv[ch] * inv_std[ch] / count
                                * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    } else {
                        for (i, d) in dx.iter_mut().enumerate() {
                            let ch = chan(i);
                            *d = g[i] * gv[ch] * inv_std[ch];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::LayerNorm { x, gain, offset, xhat, inv_std } => {
                let (rows, d) = split_last(&node.shape);
                let gv = self.value(*gain);
                let mut dgain = vec![0.0; d];
                let mut doffset = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * hr[j];
                        doffset[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let is = inv_std[r];
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = is / d as f64 * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *offset, doffset);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(g, &v)| g * (std_normal_cdf(v) + v * std_normal_pdf(v)))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::PrependToken { x, token } => {
                let s = &node.shape;
                let (b, n1, d) = (s[0], s[1], s[2]);
                if self.rg(*x) {
                    let mut dx = Vec::with_capacity(b * (n1 - 1) * d);
                    for bi in 0..b {
                        dx.extend_from_slice(&g[(bi * n1 + 1) * d..(bi + 1) * n1 * d]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*token) {
                    let mut dt = vec![0.0; d];
                    for bi in 0..b {
                        let row = &g[bi * n1 * d..(bi * n1 + 1) * d];
                        dt.iter_mut().zip(row).for_each(|(t, v)| *t += v);
                    }
                    self.accumulate(grads, *token, dt);
                }
            }
            Op::SelectToken { x, index } => {
                let s = self.shape(*x);
                let (b, n, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; b * n * d];
                for bi in 0..b {
                    let start = (bi * n + index) * d;
                    dx[start..start + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AffineLastDim { x, scale } => {
                let d = scale.len();
                let dx = g.iter().enumerate().map(|(i, v)| v * scale[i % d]).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MseLoss { pred, target } => {
                let pv = self.value(*pred);
                let c = 2.0 * g[0] / pv.len() as f64;
                let d = pv.iter().zip(target).map(|(p, t)| c * (p - t)).collect();
                self.accumulate(grads, *pred, d);
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let k = self.shape(*logits)[1];
                let b = labels.len();
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= 1.0;
                }
                let c = g[0] / b as f64;
                d.iter_mut().for_each(|v| *v *= c);
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}

fn matmul_nn(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let o = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut o[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, b)| *o += av * b);
            }
        }
    }
    out
}

fn transpose_batched(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..batch {
        let base = bi * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = x[base + r * cols + c];
            }
        }
    }
    out
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Keep-mask for inverted dropout, already scaled by `1 / (1 - p)`.
pub(crate) fn dropout_mask(len: usize, p: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = t(&[3], &[1.0, -2.0, 5.0]).with_grad();
        let mut g = Graph::new();
        let xv = g.input(&x);
        let loss = g.sum(xv).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let mut g = Graph::new();
        let xv = g.input(&x);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let mut g = Graph::new();
        let xv = g.input(&x);
        assert!(matches!(g.backward(xv), Err(Error::Shape { .. })));
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let mut x = t(&[2], &[1.0, 2.0]).with_grad();
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new();
                let xv = g.input(&x);
                let loss = g.sum(xv).unwrap();
                g.backward(loss).unwrap().get(xv).unwrap().to_vec()
            };
            x.accumulate_grad(&grads).unwrap();
        }
        assert_eq!(x.grad().unwrap(), &[2.0, 2.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_hand_product() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(&x), g.input(&w), g.input(&b));
        let y = g.linear(xv, wv, Some(bv)).unwrap();
        assert_eq!(g.value(y), &[3.0, -1.0]);
    }

    #[test]
    fn linear_preserves_leading_dims() {
        let x = Tensor::ones(&[3, 5, 4]);
        let w = Tensor::ones(&[6, 4]);
        let b = Tensor::zeros(&[6]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(&x), g.input(&w), g.input(&b));
        let y = g.linear(xv, wv, Some(bv)).unwrap();
        assert_eq!(g.shape(y), &[3, 5, 6]);
        let bad = Tensor::ones(&[6, 3]);
        let bad = g.input(&bad);
        assert!(g.linear(xv, bad, None).is_err());
    }

    #[test]
    fn linear_identity() {
        let x = t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 3.0]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(&x), g.input(&eye), g.input(&b));
        let y = g.linear(xv, wv, Some(bv)).unwrap();
        assert_eq!(g.value(y), x.data());
    }

    #[test]
    fn softmax_closed_forms() {
        let x = t(&[3], &[0.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let y = g.softmax(xv, 0).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let xv = g.input(&x);
        let y = g.softmax(xv, 0).unwrap();
        for (v, e) in g.value(y).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
        assert!(g.softmax(xv, 1).is_err());
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let x = Tensor::full(&[2, 4], 3.5);
        let gain = Tensor::ones(&[4]);
        let off = Tensor::zeros(&[4]);
        let mut g = Graph::new();
        let (xv, gv, ov) = (g.input(&x), g.input(&gain), g.input(&off));
        let y = g.layer_norm(xv, gv, ov, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|v| *v == 0.0));
        assert!(g.layer_norm(xv, gv, ov, 0.0).is_err());
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::ones(&[100_000]);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let eval = g.dropout(xv, 0.5, false, 1).unwrap();
        assert_eq!(g.value(eval), x.data());
        let train = g.dropout(xv, 0.5, true, 1).unwrap();
        let mean = g.value(train).iter().sum::<f64>() / 1e5;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
        assert!(g.value(train).iter().all(|&v| v == 0.0 || v == 2.0));
        let again = g.dropout(xv, 0.5, true, 1).unwrap();
        assert_eq!(g.value(train), g.value(again));
        assert!(g.dropout(xv, 1.0, true, 1).is_err());
        assert!(g.dropout(xv, -0.1, true, 1).is_err());
    }

    #[test]
    fn gelu_zero_and_monotone() {
        let grid: Vec<f64> = (0..=200).map(|i| -0.75 + i as f64 * 0.05).collect();
        let x = Tensor::new(vec![grid.len()], grid).unwrap();
        let zero = Tensor::zeros(&[1]);
        let mut g = Graph::new();
        let z = g.input(&zero);
        let gz = g.gelu(z).unwrap();
        assert_eq!(g.value(gz), &[0.0]);
        let xv = g.input(&x);
        let y = g.gelu(xv).unwrap();
        assert!(g.value(y).windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn permute_roundtrip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = t(&[2, 3, 4], &data);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let p = g.permute(xv, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element [k, i, j] of output == input[i, j, k]
        assert_eq!(g.value(p)[(1 * 2 + 1) * 3 + 2], data[(1 * 3 + 2) * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), &data[..]);
        assert!(g.permute(xv, &[0, 0, 1]).is_err());
    }

    #[test]
    fn non_finite_reports_scope() {
        let x = t(&[1], &[f64::MAX]);
        let mut g = Graph::new();
        g.set_scope("encoder.3");
        let xv = g.input(&x);
        match g.scale(xv, 10.0) {
            Err(Error::NonFinite { op, layer }) => {
                assert_eq!(op, "scale");
                assert_eq!(layer, "encoder.3");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_uniform() {
        let x = Tensor::zeros(&[2, 4]);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let l = g.cross_entropy(xv, &[0, 3]).unwrap();
        assert!((g.scalar_value(l).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(xv, &[0, 4]).is_err());
    }
}
