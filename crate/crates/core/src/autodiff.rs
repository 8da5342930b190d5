//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`]. A node whose inputs do not
//! require gradients is stored as a constant and never visited by the reverse
//! sweep. [`Tape::backward`] walks the recorded operations once, in reverse
//! execution order, and leaves a gradient on every node that requires one.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over NCHW input and `[C_out, C_in/groups, K, K]` weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    fn patch(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Fills `cols` (`patch × batch·pixels`) with the receptive fields of group `g`.
    fn im2col<T: Element>(&self, x: &[T], g: usize, cols: &mut [T]) {
        let k = self.kernel;
        let width = self.batch * self.pixels();
        let cin_g = self.in_per_group();
        for c in 0..cin_g {
            let ch = g * cin_g + c;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    for n in 0..self.batch {
                        let plane = &x[(n * self.in_ch + ch) * self.in_h * self.in_w..]
                            [..self.in_h * self.in_w];
                        let base = n * self.pixels();
                        for oy in 0..self.out_h {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            let out_row = &mut dst[base + oy * self.out_w..][..self.out_w];
                            if iy < 0 || iy >= self.in_h as isize {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let src = &plane[iy as usize * self.in_w..][..self.in_w];
                            for (ox, slot) in out_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                *slot = if ix < 0 || ix >= self.in_w as isize {
                                    T::zero()
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into the input gradient of group `g`.
    fn col2im<T: Element>(&self, cols: &[T], g: usize, gx: &mut [T]) {
        let k = self.kernel;
        let width = self.batch * self.pixels();
        let cin_g = self.in_per_group();
        for c in 0..cin_g {
            let ch = g * cin_g + c;
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * width..(row + 1) * width];
                    for n in 0..self.batch {
                        let plane_off = (n * self.in_ch + ch) * self.in_h * self.in_w;
                        let base = n * self.pixels();
                        for oy in 0..self.out_h {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            let row_off = plane_off + iy as usize * self.in_w;
                            for ox in 0..self.out_w {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.in_w as isize {
                                    gx[row_off + ix as usize] += src[base + oy * self.out_w + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Running statistics consumed by batch normalization in eval mode.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics observed during a train-mode batch-norm pass.
/// `var` is the unbiased estimate, as used for running-statistics updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    WeightedSum { x: Var, weights: Vec<T> },
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Dropout { x: Var, keep: Option<Vec<T>> },
    GlobalAvgPool { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
    KlDivergence { p: Var, log_q: Var },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; its `requires_grad` flag decides whether
    /// gradients flow to it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op: requires_grad.then_some(op),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(mismatch(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.data(a), k as isize, 1, self.data(b), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.data(x).iter().map(|v| *v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x, factor }, &[x])
    }

    /// Scalar `Σ x_i · w_i` against constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.data(x).len() {
            return Err(mismatch("weighted_sum", format!("{} weights for {:?}", weights.len(), self.shape(x))));
        }
        let s = self.data(x).iter().zip(&weights).map(|(a, b)| *a * *b).sum();
        self.push("weighted_sum", vec![], vec![s], Op::WeightedSum { x, weights }, &[x])
    }

    /// Affine layer: `x · wᵀ + b` with `x: [N, F_in]`, `w: [F_out, F_in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = self.matrix_dims("dense", x)?;
        let (fout, fin2) = self.matrix_dims("dense", w)?;
        if fin != fin2 {
            return Err(mismatch("dense", format!("input [{n}, {fin}] vs weight [{fout}, {fin2}]")));
        }
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(mismatch("dense", format!("bias {:?} for {fout} outputs", self.shape(b))));
            }
            let bias = self.data(b);
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(n, fin, fout, T::one(), self.data(x), fin as isize, 1, self.data(w), 1, fin as isize, beta, &mut out, fout as isize, 1);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("dense", vec![n, fout], out, Op::Dense { x, w, b }, &inputs)
    }

    /// 2-D convolution over NCHW input with `[C_out, C_in/groups, K, K]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (batch, in_ch, in_h, in_w) = match self.shape(x) {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(mismatch("conv2d", format!("input must be NCHW, got {s:?}"))),
        };
        let (out_ch, cin_g, kh, kw) = match self.shape(w) {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            s => return Err(mismatch("conv2d", format!("weight must be 4-D, got {s:?}"))),
        };
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(mismatch("conv2d", format!("groups={groups} must divide in_ch={in_ch} and out_ch={out_ch}")));
        }
        if cin_g != in_ch / groups || kh != kw || kh == 0 {
            return Err(mismatch("conv2d", format!("weight {:?} for in_ch={in_ch}, groups={groups}", self.shape(w))));
        }
        if stride == 0 {
            return Err(mismatch("conv2d", "stride must be >= 1".into()));
        }
        if in_h + 2 * pad < kh || in_w + 2 * pad < kh {
            return Err(mismatch("conv2d", format!("kernel {kh} exceeds padded input {in_h}x{in_w}+{pad}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(mismatch("conv2d", format!("bias {:?} for {out_ch} channels", self.shape(b))));
            }
        }
        let geom = ConvGeometry {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel: kh,
            stride,
            pad,
            groups,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kh) / stride + 1,
        };
        let out = conv_forward(&geom, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", vec![batch, out_ch, geom.out_h, geom.out_w], out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, out, Op::Relu { x }, &[x])
    }

    /// Batch normalization over the channel axis (axis 1) of `[N, C]` or
    /// `[N, C, H, W]` input. Train mode returns the batch statistics so the
    /// caller can maintain running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>, eps: T) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(mismatch("batch_norm", format!("expected [N, C] or [N, C, H, W], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm", format!("affine params {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta))));
        }
        let m = n * spatial;
        let xd = self.data(x);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(mismatch("batch_norm", format!("train mode needs >= 2 values per channel, got {m}")));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (ch, (mu, v)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += xd[(i * c + ch) * spatial..][..spatial].iter().copied().sum::<T>();
                    }
                    *mu = s / T::from_f64(m as f64);
                    let mut ss = T::zero();
                    for i in 0..n {
                        for val in &xd[(i * c + ch) * spatial..][..spatial] {
                            let d = *val - *mu;
                            ss += d * d;
                        }
                    }
                    *v = ss / T::from_f64(m as f64);
                }
                let unbiased = var.iter().map(|v| *v * T::from_f64(m as f64 / (m - 1) as f64)).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(mismatch("batch_norm", format!("running stats of length {}/{} for {c} channels", mean.len(), var.len())));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                for j in off..off + spatial {
                    let h = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + bt[ch];
                }
            }
        }
        let train = matches!(mode, BnMode::Train);
        let var_out = self.push("batch_norm", shape, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta])?;
        Ok((var_out, stats))
    }

    /// Inverted dropout. With an RNG the op runs in train mode, zeroing each
    /// element with probability `p` and scaling survivors by `1/(1-p)`;
    /// without one it is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        let shape = self.shape(x).to_vec();
        match rng {
            Some(rng) if p > 0.0 => {
                let scale = T::from_f64(1.0 / (1.0 - p));
                let keep: Vec<T> = (0..self.data(x).len())
                    .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
                    .collect();
                let out = self.data(x).iter().zip(&keep).map(|(v, k)| *v * *k).collect();
                self.push("dropout", shape, out, Op::Dropout { x, keep: Some(keep) }, &[x])
            }
            _ => {
                let out = self.data(x).to_vec();
                self.push("dropout", shape, out, Op::Dropout { x, keep: None }, &[x])
            }
        }
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = match self.shape(x) {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(mismatch("global_avg_pool", format!("input must be NCHW, got {s:?}"))),
        };
        let area = T::from_f64((h * w) as f64);
        let out = self.data(x).chunks(h * w).map(|plane| plane.iter().copied().sum::<T>() / area).collect();
        self.push("global_avg_pool", vec![n, c], out, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims("softmax", x)?;
        let out = softmax_rows(self.data(x), c);
        let shape = self.shape(x).to_vec();
        self.push("softmax", shape, out, Op::Softmax { x }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims("log_softmax", x)?;
        let mut out = Vec::with_capacity(self.data(x).len());
        for row in self.data(x).chunks(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|v| *v - lse));
        }
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax { x }, &[x])
    }

    /// Batch-mean categorical cross-entropy of `softmax(logits)` against class labels.
    pub fn cross_entropy_with_softmax(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims("cross_entropy_with_softmax", logits)?;
        if labels.len() != n {
            return Err(mismatch("cross_entropy_with_softmax", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(mismatch("cross_entropy_with_softmax", format!("label {bad} outside {c} classes")));
        }
        let data = self.data(logits);
        let probs = softmax_rows(data, c);
        let mut total = T::zero();
        for (i, row) in data.chunks(c).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln();
            total += lse - row[labels[i]];
        }
        let loss = total / T::from_f64(n as f64);
        self.push("cross_entropy_with_softmax", vec![], vec![loss], Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, &[logits])
    }

    /// Batch-mean `KL(p ‖ q)` from a target distribution `p` and log-probabilities `log_q`,
    /// both `[N, C]`. Zero entries of `p` contribute nothing.
    pub fn kl_divergence(&mut self, p: Var, log_q: Var) -> Result<Var> {
        let (n, _) = self.matrix_dims("kl_divergence", p)?;
        if self.shape(p) != self.shape(log_q) {
            return Err(mismatch("kl_divergence", format!("{:?} vs {:?}", self.shape(p), self.shape(log_q))));
        }
        let total: T = self
            .data(p)
            .iter()
            .zip(self.data(log_q))
            .filter(|(pv, _)| **pv > T::zero())
            .map(|(pv, lq)| *pv * (pv.ln() - *lq))
            .sum();
        let loss = total / T::from_f64(n as f64);
        self.push("kl_divergence", vec![], vec![loss], Op::KlDivergence { p, log_q }, &[p, log_q])
    }

    /// Reverse sweep from a scalar loss. Every node that requires a gradient
    /// receives one; the recorded operations are released afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("tape already consumed by a previous backward pass".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward("loss is not connected to any tensor requiring grad".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(op) = self.nodes[i].op.take() else { continue };
            let Some(gout) = grads[i].clone() else { continue };
            self.propagate(&op, &gout, i, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                let g = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.set_grad(g)?;
            }
            node.op = None;
        }
        self.consumed = true;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, op: &Op<T>, gout: &[T], out_idx: usize, grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    T::gemm(m, n, k, T::one(), gout, n as isize, 1, bd, 1, n as isize, T::one(), ga, k as isize, 1)
                });
                self.accumulate(grads, *b, |gb| {
                    T::gemm(k, m, n, T::one(), ad, 1, k as isize, gout, n as isize, 1, T::one(), gb, n as isize, 1)
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |g| g.iter_mut().zip(gout).for_each(|(g, o)| *g += *o));
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |g| g.iter_mut().zip(gout).for_each(|(g, o)| *g += *o * *factor));
            }
            Op::WeightedSum { x, weights } => {
                let s = gout[0];
                self.accumulate(grads, *x, |g| g.iter_mut().zip(weights).for_each(|(g, w)| *g += s * *w));
            }
            Op::Dense { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                let (xd, wd) = (self.data(*x), self.data(*w));
                self.accumulate(grads, *x, |gx| {
                    T::gemm(n, fout, fin, T::one(), gout, fout as isize, 1, wd, fin as isize, 1, T::one(), gx, fin as isize, 1)
                });
                self.accumulate(grads, *w, |gw| {
                    T::gemm(fout, n, fin, T::one(), gout, 1, fout as isize, xd, fin as isize, 1, T::one(), gw, fin as isize, 1)
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for row in gout.chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(g, o)| *g += *o);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                conv_backward(self, geom, *x, *w, *b, gout, grads);
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |g| {
                    for ((g, o), v) in g.iter_mut().zip(gout).zip(xd) {
                        if *v > T::zero() {
                            *g += *o;
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let gd = self.data(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * spatial;
                        for j in off..off + spatial {
                            sum_g[ch] += gout[j];
                            sum_gx[ch] += gout[j] * xhat[j];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |g| g.iter_mut().zip(&sum_gx).for_each(|(g, s)| *g += *s));
                self.accumulate(grads, *beta, |g| g.iter_mut().zip(&sum_g).for_each(|(g, s)| *g += *s));
                let m = T::from_f64((n * spatial) as f64);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * spatial;
                            let k = gd[ch] * inv_std[ch];
                            for j in off..off + spatial {
                                if *train {
                                    // dx = γ/σ · (g − mean(g) − x̂ · mean(g·x̂))
                                    gx[j] += k * (gout[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m);
                                } else {
                                    gx[j] += k * gout[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, keep } => {
                self.accumulate(grads, *x, |g| match keep {
                    Some(keep) => g.iter_mut().zip(gout).zip(keep).for_each(|((g, o), k)| *g += *o * *k),
                    None => g.iter_mut().zip(gout).for_each(|(g, o)| *g += *o),
                });
            }
            Op::GlobalAvgPool { x } => {
                let shape = self.shape(*x);
                let area = shape[2] * shape[3];
                let inv = T::one() / T::from_f64(area as f64);
                self.accumulate(grads, *x, |g| {
                    for (plane, o) in g.chunks_mut(area).zip(gout) {
                        plane.iter_mut().for_each(|v| *v += *o * inv);
                    }
                });
            }
            Op::Softmax { x } => {
                let c = self.shape(*x)[1];
                let s = self.nodes[out_idx].value.data();
                self.accumulate(grads, *x, |g| {
                    for ((grow, orow), srow) in g.chunks_mut(c).zip(gout.chunks(c)).zip(s.chunks(c)) {
                        let dot: T = orow.iter().zip(srow).map(|(o, s)| *o * *s).sum();
                        for ((g, o), s) in grow.iter_mut().zip(orow).zip(srow) {
                            *g += *s * (*o - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let c = self.shape(*x)[1];
                let ls = self.nodes[out_idx].value.data();
                self.accumulate(grads, *x, |g| {
                    for ((grow, orow), lrow) in g.chunks_mut(c).zip(gout.chunks(c)).zip(ls.chunks(c)) {
                        let total: T = orow.iter().copied().sum();
                        for ((g, o), l) in grow.iter_mut().zip(orow).zip(lrow) {
                            *g += *o - l.exp() * total;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let c = self.shape(*logits)[1];
                let scale = gout[0] / T::from_f64(labels.len() as f64);
                self.accumulate(grads, *logits, |g| {
                    for (i, (grow, prow)) in g.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for (j, (g, p)) in grow.iter_mut().zip(prow).enumerate() {
                            let target = if j == labels[i] { T::one() } else { T::zero() };
                            *g += scale * (*p - target);
                        }
                    }
                });
            }
            Op::KlDivergence { p, log_q } => {
                let n = self.shape(*p)[0];
                let scale = gout[0] / T::from_f64(n as f64);
                let (pd, lq) = (self.data(*p), self.data(*log_q));
                self.accumulate(grads, *p, |g| {
                    for ((g, pv), l) in g.iter_mut().zip(pd).zip(lq) {
                        if *pv > T::zero() {
                            *g += scale * (pv.ln() + T::one() - *l);
                        }
                    }
                });
                self.accumulate(grads, *log_q, |g| g.iter_mut().zip(pd).for_each(|(g, pv)| *g -= scale * *pv));
            }
        }
    }
}

/// Row-wise numerically stable softmax of a `[rows, cols]` buffer.
pub fn softmax_rows<T: Element>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (*v - mx).exp()));
        let total: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

fn conv_forward<T: Element>(geom: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let patch = geom.patch();
    let width = geom.batch * geom.pixels();
    let cout_g = geom.out_per_group();
    let mut cols = vec![T::zero(); patch * width];
    let mut tmp = vec![T::zero(); cout_g * width];
    let mut out = vec![T::zero(); geom.batch * geom.out_ch * geom.pixels()];
    for g in 0..geom.groups {
        geom.im2col(x, g, &mut cols);
        let wg = &w[g * cout_g * patch..(g + 1) * cout_g * patch];
        T::gemm(cout_g, patch, width, T::one(), wg, patch as isize, 1, &cols, width as isize, 1, T::zero(), &mut tmp, width as isize, 1);
        for oc in 0..cout_g {
            let ch = g * cout_g + oc;
            let b = bias.map_or(T::zero(), |b| b[ch]);
            for n in 0..geom.batch {
                let src = &tmp[oc * width + n * geom.pixels()..][..geom.pixels()];
                let dst = &mut out[(n * geom.out_ch + ch) * geom.pixels()..][..geom.pixels()];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = *s + b);
            }
        }
    }
    out
}

fn conv_backward<T: Element>(
    tape: &Tape<T>,
    geom: &ConvGeometry,
    x: Var,
    w: Var,
    b: Option<Var>,
    gout: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let patch = geom.patch();
    let width = geom.batch * geom.pixels();
    let cout_g = geom.out_per_group();
    let pixels = geom.pixels();
    let need_x = tape.requires_grad(x);
    let need_w = tape.requires_grad(w);
    let xd = tape.data(x);
    let wd = tape.data(w);
    let mut cols = vec![T::zero(); patch * width];
    let mut gcols = vec![T::zero(); patch * width];
    let mut gout_g = vec![T::zero(); cout_g * width];
    let mut gw_all = need_w.then(|| vec![T::zero(); wd.len()]);
    let mut gx_all = need_x.then(|| vec![T::zero(); xd.len()]);
    for g in 0..geom.groups {
        for oc in 0..cout_g {
            let ch = g * cout_g + oc;
            for n in 0..geom.batch {
                let src = &gout[(n * geom.out_ch + ch) * pixels..][..pixels];
                gout_g[oc * width + n * pixels..][..pixels].copy_from_slice(src);
            }
        }
        if let Some(gw) = gw_all.as_mut() {
            geom.im2col(xd, g, &mut cols);
            let gwg = &mut gw[g * cout_g * patch..(g + 1) * cout_g * patch];
            // gW_g = gout_g · colsᵀ
            T::gemm(cout_g, width, patch, T::one(), &gout_g, width as isize, 1, &cols, 1, width as isize, T::zero(), gwg, patch as isize, 1);
        }
        if let Some(gx) = gx_all.as_mut() {
            let wg = &wd[g * cout_g * patch..(g + 1) * cout_g * patch];
            // gcols = W_gᵀ · gout_g
            T::gemm(patch, cout_g, width, T::one(), wg, 1, patch as isize, &gout_g, width as isize, 1, T::zero(), &mut gcols, width as isize, 1);
            geom.col2im(&gcols, g, gx);
        }
    }
    if let Some(gx_new) = gx_all {
        tape.accumulate(grads, x, |g| g.iter_mut().zip(&gx_new).for_each(|(g, v)| *g += *v));
    }
    if let Some(gw_new) = gw_all {
        tape.accumulate(grads, w, |g| g.iter_mut().zip(&gw_new).for_each(|(g, v)| *g += *v));
    }
    if let Some(b) = b {
        tape.accumulate(grads, b, |gb| {
            for n in 0..geom.batch {
                for (ch, gbc) in gb.iter_mut().enumerate() {
                    *gbc += gout[(n * geom.out_ch + ch) * pixels..][..pixels].iter().copied().sum::<T>();
                }
            }
        });
    }
}
