use serde::{Deserialize, Serialize};

use super::conv::{self, ConvGeom};
use super::{gemm, shape_err, MatRef, Real, Result, Tensor, TensorError};

/// Probability clamp applied before the logarithms in [`Graph::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;
/// Default variance floor for batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Max,
    Avg,
    GlobalAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance of a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F = f32> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Real> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![F::ZERO; channels], var: vec![F::ONE; channels] }
    }

    pub fn cast<G: Real>(&self) -> RunningStats<G> {
        RunningStats {
            mean: self.mean.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            var: self.var.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }
}

enum Op<F> {
    Leaf,
    Conv {
        x: usize,
        k: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: usize,
        window: usize,
        stride: usize,
    },
    GlobalAvg {
        x: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
    },
    ScaleChannels {
        x: usize,
        gates: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: F,
    },
    Sum {
        x: usize,
    },
    Reshape {
        x: usize,
    },
    DotConst {
        x: usize,
        weights: Vec<F>,
    },
    /// `coef` holds normalized per-sample weights; `None` means a plain mean.
    Bce {
        p: usize,
        labels: Vec<F>,
        coef: Option<Vec<F>>,
    },
}

impl<F> Op<F> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::GlobalAvg { .. } => "global_avg_pool",
            Op::Dense { .. } => "dense",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Concat { .. } => "concat_channels",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
            Op::DotConst { .. } => "dot_const",
            Op::Bce { .. } => "bce_loss",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, k, b, .. } => {
                let mut p = vec![*x, *k];
                p.extend(b);
                p
            }
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::GlobalAvg { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Reshape { x }
            | Op::DotConst { x, .. } => vec![*x],
            Op::Bce { p, .. } => vec![*p],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs } => xs.clone(),
            Op::ScaleChannels { x, gates } => vec![*x, *gates],
            Op::Add { a, b } => vec![*a, *b],
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Append-only computation record with reverse-mode differentiation.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a trainable input whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, true)
    }

    /// Adds an input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, `None` for nodes that do not require one.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents().into_iter().map(Var).collect()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        let tag = op.tag();
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: tag, what: "output" });
        }
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Grouped 2-D cross-correlation. `kernel` is `O x C/groups x kH x kW`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.val(input).shape(), self.val(kernel).shape(), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.val(b).shape() != [geom.o] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.val(b).shape(), geom.o),
                ));
            }
        }
        let out =
            conv::forward(&geom, self.val(input).data(), self.val(kernel).data(), bias.map(|b| self.val(b).data()));
        let value = Tensor::from_parts(geom.out_shape(), out);
        self.push(value, Op::Conv { x: input.0, k: kernel.0, b: bias.map(|b| b.0), geom })
    }

    /// Windowed max/average pooling with floor semantics (a trailing
    /// remainder that does not fill a window is dropped), or global average
    /// pooling to `N x C x 1 x 1` (window and stride ignored).
    pub fn pool2d(&mut self, input: Var, mode: PoolMode, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.val(input).nchw("pool2d")?;
        if mode == PoolMode::GlobalAvg {
            let hw = h * w;
            let inv = F::ONE / F::from_usize(hw);
            let out: Vec<F> = self.val(input).data().chunks(hw).map(|p| p.iter().copied().sum::<F>() * inv).collect();
            return self.push(Tensor::from_parts(vec![n, c, 1, 1], out), Op::GlobalAvg { x: input.0 });
        }
        if window == 0 || stride == 0 {
            return Err(shape_err("pool2d", "window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(shape_err("pool2d", format!("window {window} larger than input {h}x{w}")));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let x = self.val(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::new();
        let inv = F::ONE / F::from_usize(window * window);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * stride, ox * stride);
                    match mode {
                        PoolMode::Max => {
                            let mut best = base + y0 * w + x0;
                            for dy in 0..window {
                                for dx in 0..window {
                                    let idx = base + (y0 + dy) * w + x0 + dx;
                                    if x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                            }
                            argmax.push(best);
                            out.push(x[best]);
                        }
                        _ => {
                            let mut acc = F::ZERO;
                            for dy in 0..window {
                                for dx in 0..window {
                                    acc += x[base + (y0 + dy) * w + x0 + dx];
                                }
                            }
                            out.push(acc * inv);
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        let op = match mode {
            PoolMode::Max => Op::MaxPool { x: input.0, argmax },
            _ => Op::AvgPool { x: input.0, window, stride },
        };
        self.push(value, op)
    }

    /// Affine map `input (N x F) * weight (F x K) + bias (K)`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.val(input).shape(), self.val(weight).shape(), self.val(bias).shape());
        let ([n, f], [fw, k]) = (xs, ws) else {
            return Err(shape_err("dense", format!("input {xs:?} and weight {ws:?} must be 2-D")));
        };
        let (n, f, k) = (*n, *f, *k);
        if f != *fw || bs != [k] {
            return Err(shape_err("dense", format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(self.val(bias).data());
        }
        gemm(MatRef::new(self.val(input).data(), n, f), MatRef::new(self.val(weight).data(), f, k), F::ONE, &mut out);
        self.push(Tensor::from_parts(vec![n, k], out), Op::Dense { x: input.0, w: weight.0, b: bias.0 })
    }

    /// Batch normalization over the N, H, W axes of an NCHW tensor.
    ///
    /// Train mode normalizes by the biased batch variance and folds the batch
    /// mean and unbiased variance into `stats` with momentum [`BN_MOMENTUM`].
    /// Eval mode normalizes by `stats` and leaves it untouched.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<F>,
        mode: BnMode,
        eps: F,
    ) -> Result<Var> {
        let (n, c, h, w) = self.val(input).nchw("batchnorm2d")?;
        if self.val(gamma).shape() != [c] || self.val(beta).shape() != [c] {
            return Err(shape_err(
                "batchnorm2d",
                format!("{c} channels but gamma {:?}, beta {:?}", self.val(gamma).shape(), self.val(beta).shape()),
            ));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err("batchnorm2d", format!("running stats sized for {}", stats.mean.len())));
        }
        let hw = h * w;
        let m = n * hw;
        if mode == BnMode::Train && m < 2 {
            return Err(TensorError::Invalid {
                op: "batchnorm2d",
                detail: "train mode needs more than one value per channel".into(),
            });
        }
        let x = self.val(input).data();
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![F::ZERO; x.len()];
        let mut inv_std = vec![F::ZERO; c];
        let mut out = vec![F::ZERO; x.len()];
        let momentum = F::from_f64(BN_MOMENTUM);
        for ch in 0..c {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut sum = F::ZERO;
                    for s in 0..n {
                        sum += x[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().copied().sum::<F>();
                    }
                    let mean = sum / F::from_usize(m);
                    let mut sq = F::ZERO;
                    for s in 0..n {
                        for &v in &x[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                            let d = v - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / F::from_usize(m);
                    let unbiased = sq / F::from_usize(m - 1);
                    stats.mean[ch] = (F::ONE - momentum) * stats.mean[ch] + momentum * mean;
                    stats.var[ch] = (F::ONE - momentum) * stats.var[ch] + momentum * unbiased;
                    (mean, var)
                }
                BnMode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = F::ONE / (var + eps).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                for i in range {
                    let xh = (x[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(
            value,
            Op::BatchNorm { x: input.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, train: mode == BnMode::Train },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = self.val(input);
        let out = t.data().iter().map(|&v| if v > F::ZERO { v } else { F::ZERO }).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::Relu { x: input.0 })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let t = self.val(input);
        let out = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::Sigmoid { x: input.0 })
    }

    /// Concatenates NCHW tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(shape_err("concat_channels", "no inputs"));
        };
        let (n, _, h, w) = self.val(first).nchw("concat_channels")?;
        let mut chans = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (vn, vc, vh, vw) = self.val(v).nchw("concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.val(first).shape(), self.val(v).shape()),
                ));
            }
            chans.push(vc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (&v, &c) in inputs.iter().zip(&chans) {
                out.extend_from_slice(&self.val(v).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::from_parts(vec![n, total, h, w], out);
        self.push(value, Op::Concat { xs: inputs.iter().map(|v| v.0).collect() })
    }

    /// Multiplies each channel of an NCHW tensor by a per-sample gate
    /// (`N x C` or `N x C x 1 x 1`).
    pub fn scale_channels(&mut self, input: Var, gates: Var) -> Result<Var> {
        let (n, c, h, w) = self.val(input).nchw("scale_channels")?;
        let gs = self.val(gates).shape();
        if !(gs == [n, c] || gs == [n, c, 1, 1]) {
            return Err(shape_err("scale_channels", format!("input {:?}, gates {gs:?}", [n, c, h, w])));
        }
        let hw = h * w;
        let g = self.val(gates).data();
        let out = self
            .val(input)
            .data()
            .chunks(hw)
            .zip(g)
            .flat_map(|(plane, &gv)| plane.iter().map(move |&v| v * gv))
            .collect();
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(value, Op::ScaleChannels { x: input.0, gates: gates.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape())));
        }
        let out = self.val(a).data().iter().zip(self.val(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_parts(self.val(a).shape().to_vec(), out);
        self.push(value, Op::Add { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, input: Var, factor: F) -> Result<Var> {
        let t = self.val(input);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| v * factor).collect());
        self.push(value, Op::Scale { x: input.0, factor })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.val(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: input.0 })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(input).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { x: input.0 })
    }

    /// `Σ input_i * weights_i` against a constant weight tensor.
    pub fn dot_const(&mut self, input: Var, weights: &Tensor<F>) -> Result<Var> {
        if weights.numel() != self.val(input).numel() {
            return Err(shape_err("dot_const", format!("{:?} vs {:?}", self.val(input).shape(), weights.shape())));
        }
        let s = self.val(input).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::DotConst { x: input.0, weights: weights.data().to_vec() })
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&mut self, probs: Var, labels: &Tensor<F>) -> Result<Var> {
        self.bce_impl(probs, labels, None)
    }

    /// Binary cross-entropy averaged with per-sample weights:
    /// `sum(w_i * l_i) / sum(w_i)`. Weights must be nonnegative, not all zero.
    pub fn weighted_bce_loss(&mut self, probs: Var, labels: &Tensor<F>, weights: &[F]) -> Result<Var> {
        if weights.len() != labels.numel() {
            return Err(shape_err("bce_loss", format!("{} weights for {} labels", weights.len(), labels.numel())));
        }
        let total: F = weights.iter().copied().sum();
        if weights.iter().any(|&w| !(w >= F::ZERO) || !w.is_finite()) || !(total > F::ZERO) {
            return Err(TensorError::Invalid {
                op: "bce_loss",
                detail: "weights must be nonnegative with a positive sum".into(),
            });
        }
        self.bce_impl(probs, labels, Some(weights.iter().map(|&w| w / total).collect()))
    }

    fn bce_impl(&mut self, probs: Var, labels: &Tensor<F>, coef: Option<Vec<F>>) -> Result<Var> {
        let p = self.val(probs);
        if p.numel() != labels.numel() {
            return Err(shape_err("bce_loss", format!("{:?} vs {:?}", p.shape(), labels.shape())));
        }
        if let Some(&bad) = labels.data().iter().find(|&&y| y != F::ZERO && y != F::ONE) {
            return Err(TensorError::InvalidLabel(bad.to_f64()));
        }
        let (lo, hi) = clamp_bounds::<F>();
        let mut total = F::ZERO;
        for (i, (&pv, &y)) in p.data().iter().zip(labels.data()).enumerate() {
            let pc = pv.max(lo).min(hi);
            let l = -(y * pc.ln() + (F::ONE - y) * (F::ONE - pc).ln());
            total += match &coef {
                Some(c) => c[i] * l,
                None => l,
            };
        }
        let loss = if coef.is_some() { total } else { total / F::from_usize(p.numel()) };
        self.push(Tensor::scalar(loss), Op::Bce { p: probs.0, labels: labels.data().to_vec(), coef })
    }

    /// Accumulates `d loss / d node` into the gradient buffer of every node
    /// that requires a gradient. Nodes the loss does not depend on receive
    /// zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.val(loss).shape();
        if self.val(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![F::ONE]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dy) = adj[id].take() else { continue };
            for (parent, g) in self.local_grads(id, &dy) {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                match &mut adj[parent] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
            add_into(&mut self.nodes[id].grad, &dy);
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![F::ZERO; node.value.numel()]);
            }
        }
        Ok(())
    }

    /// Gradients for each parent of node `id` given the node's adjoint.
    fn local_grads(&self, id: usize, dy: &[F]) -> Vec<(usize, Vec<F>)> {
        let node = &self.nodes[id];
        let wants = |p: usize| self.nodes[p].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv { x, k, b, geom } => {
                let need = (wants(*x), wants(*k), b.map(wants).unwrap_or(false));
                let g = conv::backward(geom, self.nodes[*x].value.data(), self.nodes[*k].value.data(), dy, need);
                let mut out = Vec::new();
                if let Some(dx) = g.dx {
                    out.push((*x, dx));
                }
                if let Some(dk) = g.dk {
                    out.push((*k, dk));
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    out.push((*b, db));
                }
                out
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![F::ZERO; self.nodes[*x].value.numel()];
                for (&i, &d) in argmax.iter().zip(dy) {
                    dx[i] += d;
                }
                vec![(*x, dx)]
            }
            Op::AvgPool { x, window, stride } => {
                let xin = &self.nodes[*x].value;
                let (_, _, h, w) = xin.nchw("pool2d").expect("validated in forward");
                let (_, _, oh, ow) = node.value.nchw("pool2d").expect("validated in forward");
                let inv = F::ONE / F::from_usize(window * window);
                let mut dx = vec![F::ZERO; xin.numel()];
                for (plane, dyp) in dy.chunks(oh * ow).enumerate() {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let d = dyp[oy * ow + ox] * inv;
                            for wy in 0..*window {
                                for wx in 0..*window {
                                    dx[base + (oy * stride + wy) * w + ox * stride + wx] += d;
                                }
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::GlobalAvg { x } => {
                let xin = &self.nodes[*x].value;
                let (_, _, h, w) = xin.nchw("pool2d").expect("validated in forward");
                let inv = F::ONE / F::from_usize(h * w);
                let dx = dy.iter().flat_map(|&d| std::iter::repeat_n(d * inv, h * w)).collect();
                vec![(*x, dx)]
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (n, f) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[1];
                let mut out = Vec::new();
                if wants(*x) {
                    let mut dx = vec![F::ZERO; n * f];
                    gemm(MatRef::new(dy, n, k), MatRef::new(wv.data(), f, k).t(), F::ZERO, &mut dx);
                    out.push((*x, dx));
                }
                if wants(*w) {
                    let mut dw = vec![F::ZERO; f * k];
                    gemm(MatRef::new(xv.data(), n, f).t(), MatRef::new(dy, n, k), F::ZERO, &mut dw);
                    out.push((*w, dw));
                }
                if wants(*b) {
                    let mut db = vec![F::ZERO; k];
                    for row in dy.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, h, w) = node.value.nchw("batchnorm2d").expect("validated in forward");
                let hw = h * w;
                let m = F::from_usize(n * hw);
                let g = self.nodes[*gamma].value.data();
                let mut sdy = vec![F::ZERO; c];
                let mut sdyx = vec![F::ZERO; c];
                for s in 0..n {
                    for ch in 0..c {
                        let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                        for i in r {
                            sdy[ch] += dy[i];
                            sdyx[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                let mut out = Vec::new();
                if wants(*x) {
                    let mut dx = vec![F::ZERO; dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                            if *train {
                                let k = g[ch] * inv_std[ch] / m;
                                for i in r {
                                    dx[i] = k * (m * dy[i] - sdy[ch] - xhat[i] * sdyx[ch]);
                                }
                            } else {
                                let k = g[ch] * inv_std[ch];
                                for i in r {
                                    dx[i] = k * dy[i];
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if wants(*gamma) {
                    out.push((*gamma, sdyx));
                }
                if wants(*beta) {
                    out.push((*beta, sdy));
                }
                out
            }
            Op::Relu { x } => {
                let xv = self.nodes[*x].value.data();
                let dx = xv.iter().zip(dy).map(|(&v, &d)| if v > F::ZERO { d } else { F::ZERO }).collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let yv = node.value.data();
                let dx = yv.iter().zip(dy).map(|(&s, &d)| d * s * (F::ONE - s)).collect();
                vec![(*x, dx)]
            }
            Op::Concat { xs } => {
                let (n, total, h, w) = node.value.nchw("concat_channels").expect("validated in forward");
                let hw = h * w;
                let mut offset = 0;
                let mut out = Vec::new();
                for &p in xs {
                    let c = self.nodes[p].value.shape()[1];
                    if wants(p) {
                        let mut dx = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let start = (s * total + offset) * hw;
                            dx.extend_from_slice(&dy[start..start + c * hw]);
                        }
                        out.push((p, dx));
                    }
                    offset += c;
                }
                out
            }
            Op::ScaleChannels { x, gates } => {
                let (xv, gv) = (self.nodes[*x].value.data(), self.nodes[*gates].value.data());
                let hw = xv.len() / gv.len();
                let mut out = Vec::new();
                if wants(*x) {
                    let dx = dy.chunks(hw).zip(gv).flat_map(|(p, &g)| p.iter().map(move |&d| d * g)).collect();
                    out.push((*x, dx));
                }
                if wants(*gates) {
                    let dg = dy
                        .chunks(hw)
                        .zip(xv.chunks(hw))
                        .map(|(d, xp)| d.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    out.push((*gates, dg));
                }
                out
            }
            Op::Add { a, b } => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Scale { x, factor } => vec![(*x, dy.iter().map(|&d| d * *factor).collect())],
            Op::Sum { x } => vec![(*x, vec![dy[0]; self.nodes[*x].value.numel()])],
            Op::Reshape { x } => vec![(*x, dy.to_vec())],
            Op::DotConst { x, weights } => vec![(*x, weights.iter().map(|&w| w * dy[0]).collect())],
            Op::Bce { p, labels, coef } => {
                let pv = self.nodes[*p].value.data();
                let (lo, hi) = clamp_bounds::<F>();
                let inv_n = F::ONE / F::from_usize(pv.len());
                let dx = pv
                    .iter()
                    .zip(labels)
                    .enumerate()
                    .map(|(i, (&pr, &y))| {
                        if pr < lo || pr > hi {
                            F::ZERO
                        } else {
                            let c = coef.as_ref().map_or(inv_n, |c| c[i]);
                            dy[0] * c * (-y / pr + (F::ONE - y) / (F::ONE - pr))
                        }
                    })
                    .collect();
                vec![(*p, dx)]
            }
        }
    }
}

fn clamp_bounds<F: Real>() -> (F, F) {
    let lo = F::from_f64(BCE_EPS);
    (lo, F::ONE - lo)
}

fn add_into<F: Real>(slot: &mut Option<Vec<F>>, g: &[F]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Logistic function evaluated without overflow for large |x|.
pub(crate) fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::ZERO {
        F::ONE / (F::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_hand_example() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = g.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, Some(b), 1, 0, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn conv_identity_kernel_and_errors() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..2 * 3 * 4 * 5).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 4, 5], data.clone()).unwrap());
        // one identity tap per channel, depthwise
        let k = g.constant(Tensor::full(vec![3, 1, 1, 1], 1.0));
        let y = g.conv2d(x, k, None, 1, 0, 3).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let k1 = g.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
        let x1 = g.constant(Tensor::full(vec![1, 1, 3, 3], 2.0));
        let y1 = g.conv2d(x1, k1, None, 1, 0, 1).unwrap();
        assert_eq!(g.value(y1).data(), &[2.0; 9]);

        let bad = g.constant(Tensor::full(vec![1, 2, 3, 3], 1.0));
        assert!(matches!(g.conv2d(x, bad, None, 1, 0, 1), Err(TensorError::Shape { .. })));
        // (4 - 3) / 2 + 1 is not an integer extent
        let k3 = g.constant(Tensor::full(vec![1, 3, 3, 3], 1.0));
        assert!(g.conv2d(x, k3, None, 2, 0, 1).is_err());
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let m = g.pool2d(x, PoolMode::Max, 2, 2).unwrap();
        let a = g.pool2d(x, PoolMode::Avg, 2, 2).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        assert_eq!(g.value(a).data(), &[2.5]);
        let c = g.constant(Tensor::full(vec![2, 3, 5, 4], 1.75));
        let ga = g.pool2d(c, PoolMode::GlobalAvg, 0, 0).unwrap();
        assert_eq!(g.value(ga).shape(), &[2, 3, 1, 1]);
        assert!(g.value(ga).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
        assert!(g.pool2d(x, PoolMode::Max, 3, 1).is_err());
        // floor semantics: 5x5 with 2x2/2 keeps a 2x2 grid
        let odd = g.constant(Tensor::from_fn(vec![1, 1, 5, 5], |i| i as f64));
        let p = g.pool2d(odd, PoolMode::Avg, 2, 2).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(p).data()[0], (0. + 1. + 5. + 6.) / 4.);
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[1., 2.]));
        let w = g.constant(t(&[2, 1], &[1., 1.]));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);
        let eye = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let z = g.constant(t(&[2], &[0., 0.]));
        let y2 = g.dense(x, eye, z).unwrap();
        assert_eq!(g.value(y2).data(), &[1., 2.]);
        assert!(g.dense(x, b, z).is_err());
    }

    #[test]
    fn batchnorm_train_normalizes_and_constant_channel_maps_to_beta() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| ((i * 7919) % 31) as f64 * 0.3 - 2.0).collect();
        let mut data = data;
        // channel 1 constant
        for s in 0..2 {
            for i in 0..9 {
                data[(s * 2 + 1) * 9 + i] = 4.0;
            }
        }
        let x = g.constant(Tensor::new(vec![2, 2, 3, 3], data).unwrap());
        let gamma = g.constant(Tensor::full(vec![2], 1.0));
        let beta = g.constant(t(&[2], &[0.0, 0.75]));
        let mut stats = RunningStats::new(2);
        let y = g.batchnorm2d(x, gamma, beta, &mut stats, BnMode::Train, 1e-5).unwrap();
        let v = g.value(y).data();
        let ch0: Vec<f64> = (0..2).flat_map(|s| v[s * 18..s * 18 + 9].to_vec()).collect();
        let mean = ch0.iter().sum::<f64>() / 18.0;
        let var = ch0.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 18.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);
        for s in 0..2 {
            assert!(v[s * 18 + 9..s * 18 + 18].iter().all(|&a| a == 0.75));
        }
        // running stats moved toward the batch statistics
        assert!((stats.mean[1] - 0.4).abs() < 1e-12);
        assert!((stats.var[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_is_affine_and_train_rejects_single_value() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 3], &[-1.0, 0.5, 2.0]));
        let gamma = g.constant(t(&[1], &[2.0]));
        let beta = g.constant(t(&[1], &[1.0]));
        let mut stats = RunningStats::new(1);
        let y = g.batchnorm2d(x, gamma, beta, &mut stats, BnMode::Eval, 1e-5).unwrap();
        for (&o, &i) in g.value(y).data().iter().zip(&[-1.0, 0.5, 2.0]) {
            assert!((o - (2.0 * i + 1.0)).abs() < 1e-4);
        }
        let one = g.constant(t(&[1, 1, 1, 1], &[3.0]));
        assert!(g.batchnorm2d(one, gamma, beta, &mut stats, BnMode::Train, 1e-5).is_err());
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, -3.0, 3.0]));
        let s = g.sigmoid(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let big = g.constant(t(&[2], &[-30.0, 30.0]));
        let sb = g.sigmoid(big).unwrap();
        assert!(g.value(sb).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn concat_and_scale_channels() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64));
        let b = g.param(Tensor::from_fn(vec![2, 5, 2, 2], |i| -(i as f64)));
        let one = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(one), g.value(a));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 8, 2, 2]);
        assert_eq!(&g.value(c).data()[..12], &g.value(a).data()[..12]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().iter().all(|&v| v == 1.0));

        let ones = g.constant(Tensor::full(vec![2, 3], 1.0));
        let zeros = g.constant(Tensor::full(vec![2, 3], 0.0));
        let id = g.scale_channels(a, ones).unwrap();
        assert_eq!(g.value(id), g.value(a));
        let z = g.scale_channels(a, zeros).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::full(vec![2, 4], 1.0));
        assert!(g.scale_channels(a, bad).is_err());
        let odd = g.constant(Tensor::full(vec![2, 1, 3, 2], 1.0));
        assert!(g.concat_channels(&[a, odd]).is_err());
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1], &[0.5]));
        let l = g.bce_loss(p, &t(&[1], &[1.0])).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let p2 = g.constant(t(&[2], &[0.8, 0.4]));
        let l2 = g.bce_loss(p2, &t(&[2], &[1.0, 0.0])).unwrap();
        let want = (-(0.8f64).ln() - (0.6f64).ln()) / 2.0;
        assert!((g.value(l2).item() - want).abs() < 1e-12);
        assert!((g.value(l2).item() - 0.3669846).abs() < 1e-6);

        let perfect = g.constant(t(&[2], &[1.0, 0.0]));
        let l3 = g.bce_loss(perfect, &t(&[2], &[1.0, 0.0])).unwrap();
        assert!(g.value(l3).item() <= -(1.0 - BCE_EPS).ln() + 1e-15);
        assert!(g.value(l3).item() >= 0.0);

        assert!(matches!(g.bce_loss(p, &t(&[1], &[0.5])), Err(TensorError::InvalidLabel(_))));
    }

    #[test]
    fn weighted_bce() {
        let mut g = Graph::<f64>::new();
        let p = g.param(t(&[2], &[0.8, 0.4]));
        let y = t(&[2], &[1.0, 0.0]);
        let l = g.weighted_bce_loss(p, &y, &[3.0, 1.0]).unwrap();
        let want = (-3.0 * (0.8f64).ln() - (0.6f64).ln()) / 4.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);
        g.backward(l).unwrap();
        let grad = g.grad(p).unwrap();
        assert!((grad[0] - 0.75 * (-1.0 / 0.8)).abs() < 1e-12);
        assert!((grad[1] - 0.25 * (1.0 / 0.6)).abs() < 1e-12);

        let unit = g.weighted_bce_loss(p, &y, &[2.0, 2.0]).unwrap();
        let plain = g.bce_loss(p, &y).unwrap();
        assert!((g.value(unit).item() - g.value(plain).item()).abs() < 1e-15);
        assert!(g.weighted_bce_loss(p, &y, &[0.0, 0.0]).is_err());
        assert!(g.weighted_bce_loss(p, &y, &[1.0]).is_err());
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let unused = g.param(Tensor::full(vec![4], 2.0));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
        assert!(g.grad(unused).unwrap().iter().all(|&v| v == 0.0));

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(vec![1, 1, 2, 2], |i| i as f64 - 1.5));
        let r = g.relu(x).unwrap();
        let s = g.sigmoid(r).unwrap();
        let total = g.sum(s).unwrap();
        let zero = g.scale(total, 0.0).unwrap();
        g.backward(zero).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(vec![3], |i| i as f64));
        let w = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let l = g.dot_const(x, &w).unwrap();
        g.backward(l).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(l).unwrap();
        let doubled: Vec<f64> = first.iter().map(|v| v * 2.0).collect();
        assert_eq!(g.grad(x).unwrap(), &doubled[..]);
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &first[..]);
    }

    #[test]
    fn record_parents_precede_children() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(vec![1, 2, 4, 4], 0.5));
        let k = g.param(Tensor::full(vec![3, 2, 3, 3], 0.1));
        let y = g.conv2d(x, k, None, 1, 1, 1).unwrap();
        let r = g.relu(y).unwrap();
        let p = g.pool2d(r, PoolMode::GlobalAvg, 0, 0).unwrap();
        for id in 0..g.len() {
            let v = Var(id);
            assert!(g.parents(v).iter().all(|p| p.id() < id), "{}", g.op_tag(v));
        }
        assert_eq!(g.op_tag(p), "global_avg_pool");
        assert_eq!(g.parents(y), vec![x, k]);
    }
}
