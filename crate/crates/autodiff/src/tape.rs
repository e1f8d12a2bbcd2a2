use crate::kernels::{self, ConvGeom, NormStats};
use crate::{Float, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Offset(Var),
    Abs(Var),
    Exp(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Upsample2x(Var),
    GroupNorm {
        x: Var,
        group: usize,
        stats: NormStats<T>,
    },
    Modulate {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    GlobalAvgPool(Var),
    BroadcastChannels(Var),
    ConcatChannels(Vec<Var>),
    CrossEntropy {
        logits: Var,
        softmax: Tensor<T>,
        targets: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run computation record. Every forward pass builds a fresh tape;
/// [`Tape::backward`] walks it once in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf, typically a parameter.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Var {
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(v, Op::MulConst(a, c), &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn offset(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::Offset(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::MeanAll(a), &[a])
    }

    /// Sum over every axis but the first: `(n, ...) -> (n)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.shape()[0];
        let row = x.len() / n.max(1);
        let data = x.data().chunks_exact(row.max(1)).map(|r| r.iter().copied().sum()).collect();
        let v = Tensor::from_vec(&[n], data);
        self.push(v, Op::SumRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Columns `[start, start + len)` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.value(x).dims2();
        assert!(start + len <= d, "slice_cols: [{start}, {}) out of {d}", start + len);
        let mut out = Vec::with_capacity(n * len);
        for row in self.value(x).data().chunks_exact(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::from_vec(&[n, len], out);
        self.push(v, Op::SliceCols(x, start), &[x])
    }

    /// 2-d convolution, `x: (n, c_in, h, w)`, `w: (c_out, c_in, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c_in, h, wd) = self.value(x).dims4();
        let (c_out, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(c_in, wc, "conv2d: input has {c_in} channels, kernel expects {wc}");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
        };
        let bias = b.map(|b| self.value(b).data());
        if let Some(bias) = bias {
            assert_eq!(bias.len(), c_out);
        }
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let v = Tensor::from_vec(&[n, c_out, geom.out_h(), geom.out_w()], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(v, Op::Conv2d { x, w, b, geom }, &parents)
    }

    /// `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, d_in) = self.value(x).dims2();
        let (d_out, wd) = self.value(w).dims2();
        assert_eq!(d_in, wd, "linear: input width {d_in}, weight expects {wd}");
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), d_out);
            for row in out.chunks_exact_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            n,
            d_in,
            d_out,
            T::one(),
            self.value(x).data(),
            d_in as isize,
            1,
            self.value(w).data(),
            1,
            d_in as isize,
            T::one(),
            &mut out,
            d_out as isize,
            1,
        );
        let v = Tensor::from_vec(&[n, d_out], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(v, Op::Linear { x, w, b }, &parents)
    }

    /// Bilinear 2x upsampling with half-pixel centres.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out = kernels::upsample2x_forward(self.value(x).data(), n, c, h, w);
        let v = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out);
        self.push(v, Op::Upsample2x(x), &[x])
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        self.group_norm(x, h * w, eps)
    }

    /// Per-sample normalization over channels and spatial axes (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let (_, c, h, w) = self.value(x).dims4();
        self.group_norm(x, c * h * w, eps)
    }

    fn group_norm(&mut self, x: Var, group: usize, eps: T) -> Var {
        let stats = kernels::normalize_groups(self.value(x).data(), group, eps);
        let v = Tensor::from_vec(self.shape(x), stats.xhat.clone());
        self.push(v, Op::GroupNorm { x, group, stats }, &[x])
    }

    /// `x[n, c, ..] * scale[n, c] + shift[n, c]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(scale), &[n, c], "modulate: scale shape");
        assert_eq!(self.shape(shift), &[n, c], "modulate: shift shape");
        let plane = h * w;
        let xs = self.value(x).data();
        let s = self.value(scale).data();
        let t = self.value(shift).data();
        let mut out = vec![T::zero(); xs.len()];
        for (i, (src, dst)) in xs.chunks_exact(plane).zip(out.chunks_exact_mut(plane)).enumerate() {
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * s[i] + t[i];
            }
        }
        let v = Tensor::from_vec(&[n, c, h, w], out);
        self.push(v, Op::Modulate { x, scale, shift }, &[x, scale, shift])
    }

    /// `x[n, c, ..] * gamma[c] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let plane = h * w;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); xs.len()];
        for (i, (src, dst)) in xs.chunks_exact(plane).zip(out.chunks_exact_mut(plane)).enumerate() {
            let ch = i % c;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * g[ch] + b[ch];
            }
        }
        let v = Tensor::from_vec(&[n, c, h, w], out);
        self.push(v, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta])
    }

    /// `(n, c, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let m = T::of((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<T>() / m)
            .collect();
        let v = Tensor::from_vec(&[n, c], data);
        self.push(v, Op::GlobalAvgPool(x), &[x])
    }

    /// `(n, 1, h, w) -> (n, c, h, w)` by repetition.
    pub fn broadcast_channels(&mut self, x: Var, c: usize) -> Var {
        let (n, one, h, w) = self.value(x).dims4();
        assert_eq!(one, 1, "broadcast_channels expects a single channel");
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * plane);
        for p in src.chunks_exact(plane) {
            for _ in 0..c {
                out.extend_from_slice(p);
            }
        }
        let v = Tensor::from_vec(&[n, c, h, w], out);
        self.push(v, Op::BroadcastChannels(x), &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let plane = h * w;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels: shape mismatch");
            total += pc;
        }
        let mut out = Vec::with_capacity(n * total * plane);
        for i in 0..n {
            for &p in parts {
                let (_, pc, _, _) = self.value(p).dims4();
                out.extend_from_slice(&self.value(p).data()[i * pc * plane..(i + 1) * pc * plane]);
            }
        }
        let v = Tensor::from_vec(&[n, total, h, w], out);
        self.push(v, Op::ConcatChannels(parts.to_vec()), parts)
    }

    /// Mean negative log-softmax of the target class, `logits: (n, k)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (n, k) = self.value(logits).dims2();
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        let mut softmax = vec![T::zero(); n * k];
        let mut total = T::zero();
        for ((row, sm), &t) in self
            .value(logits)
            .data()
            .chunks_exact(k)
            .zip(softmax.chunks_exact_mut(k))
            .zip(targets)
        {
            assert!(t < k, "cross_entropy: target {t} out of range {k}");
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for (s, &v) in sm.iter_mut().zip(row) {
                *s = (v - lse).exp();
            }
            total += lse - row[t];
        }
        let v = Tensor::scalar(total / T::of(n as f64));
        let op = Op::CrossEntropy {
            logits,
            softmax: Tensor::from_vec(&[n, k], softmax),
            targets: targets.to_vec(),
        };
        self.push(v, op, &[logits])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |u, v| u * v));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |u, v| u * v));
                }
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.zip_map(c, |u, v| u * v)),
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * *s)),
            Op::Offset(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape));
            }
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), |u, x| {
                    if x > T::zero() {
                        u
                    } else if x < T::zero() {
                        -u
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |u, e| u * e)),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |u, x| if x > T::zero() { u } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(*a), |u, x| if x > T::zero() { u } else { u * *slope });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |u, t| u * (T::one() - t * t))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(y, |u, s| u * s * (T::one() - s))),
            Op::Softplus(a) => {
                let d = g.zip_map(self.value(*a), |u, x| u * sigmoid(x));
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(self.value(*a), |u, x| {
                    if x >= *lo && x <= *hi {
                        u
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a).to_vec();
                let n = T::of(self.value(*a).len() as f64);
                self.accumulate(grads, *a, Tensor::full(&shape, g.item() / n));
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let row = x.len() / x.shape()[0].max(1);
                let mut data = Vec::with_capacity(x.len());
                for &gi in g.data() {
                    data.extend(std::iter::repeat_n(gi, row));
                }
                self.accumulate(grads, *a, Tensor::from_vec(x.shape(), data));
            }
            Op::SliceCols(x, start) => {
                let (n, d) = self.value(*x).dims2();
                let len = y.shape()[1];
                let mut dx = vec![T::zero(); n * d];
                for (dst, src) in dx.chunks_exact_mut(d).zip(g.data().chunks_exact(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, d], dx));
            }
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let cg = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    need,
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw));
                }
                if let (Some(db), Some(b)) = (cg.db, b) {
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d_in) = self.value(*x).dims2();
                let (d_out, _) = self.value(*w).dims2();
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * d_in];
                    T::gemm(
                        n,
                        d_out,
                        d_in,
                        T::one(),
                        g.data(),
                        d_out as isize,
                        1,
                        self.value(*w).data(),
                        d_in as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        d_in as isize,
                        1,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, d_in], dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    T::gemm(
                        d_out,
                        n,
                        d_in,
                        T::one(),
                        g.data(),
                        1,
                        d_out as isize,
                        self.value(*x).data(),
                        d_in as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        d_in as isize,
                        1,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(&[d_out, d_in], dw));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![T::zero(); d_out];
                    for row in g.data().chunks_exact(d_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_vec(&[d_out], db));
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let dx = kernels::upsample2x_backward(g.data(), n, c, h, w);
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::GroupNorm { x, group, stats } => {
                let dx = kernels::normalize_groups_backward(stats, g.data(), *group);
                self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx));
            }
            Op::Modulate { x, scale, shift } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let xs = self.value(*x).data();
                let s = self.value(*scale).data();
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xs.len()];
                    for (i, (src, dst)) in g.data().chunks_exact(plane).zip(dx.chunks_exact_mut(plane)).enumerate() {
                        for (d, &u) in dst.iter_mut().zip(src) {
                            *d = u * s[i];
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                if self.wants(*scale) {
                    let ds = g
                        .data()
                        .chunks_exact(plane)
                        .zip(xs.chunks_exact(plane))
                        .map(|(u, v)| u.iter().zip(v).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *scale, Tensor::from_vec(&[n, c], ds));
                }
                if self.wants(*shift) {
                    let dt = g.data().chunks_exact(plane).map(|u| u.iter().copied().sum()).collect();
                    self.accumulate(grads, *shift, Tensor::from_vec(&[n, c], dt));
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let xs = self.value(*x).data();
                let gm = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xs.len()];
                    for (i, (src, dst)) in g.data().chunks_exact(plane).zip(dx.chunks_exact_mut(plane)).enumerate() {
                        for (d, &u) in dst.iter_mut().zip(src) {
                            *d = u * gm[i % c];
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (i, (u, v)) in g.data().chunks_exact(plane).zip(xs.chunks_exact(plane)).enumerate() {
                        dg[i % c] += u.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
                        db[i % c] += u.iter().copied().sum::<T>();
                    }
                    let gshape = self.shape(*gamma).to_vec();
                    let bshape = self.shape(*beta).to_vec();
                    self.accumulate(grads, *gamma, Tensor::from_vec(&gshape, dg));
                    self.accumulate(grads, *beta, Tensor::from_vec(&bshape, db));
                }
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let m = T::of((h * w) as f64);
                let mut dx = Vec::with_capacity(n * c * h * w);
                for &gi in g.data() {
                    dx.extend(std::iter::repeat_n(gi / m, h * w));
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
            }
            Op::BroadcastChannels(x) => {
                let (n, _, h, w) = self.value(*x).dims4();
                let c = y.shape()[1];
                let plane = h * w;
                let mut dx = vec![T::zero(); n * plane];
                for (i, src) in g.data().chunks_exact(plane).enumerate() {
                    let dst = &mut dx[(i / c) * plane..][..plane];
                    for (d, &u) in dst.iter_mut().zip(src) {
                        *d += u;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(&[n, 1, h, w], dx));
            }
            Op::ConcatChannels(parts) => {
                let (n, total, h, w) = y.dims4();
                let plane = h * w;
                let mut start = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(n * pc * plane);
                        for i in 0..n {
                            let base = (i * total + start) * plane;
                            dp.extend_from_slice(&g.data()[base..base + pc * plane]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[n, pc, h, w], dp));
                    }
                    start += pc;
                }
            }
            Op::CrossEntropy {
                logits,
                softmax,
                targets,
            } => {
                let (n, k) = softmax.dims2();
                let scale = g.item() / T::of(n as f64);
                let mut d = softmax.data().to_vec();
                for (row, &t) in d.chunks_exact_mut(k).zip(targets) {
                    row[t] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(&[n, k], d));
            }
        }
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
