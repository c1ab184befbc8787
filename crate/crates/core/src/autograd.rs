//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every differentiable op appends a node holding its forward value and
//! whatever it needs for the backward rule. Nodes only reference earlier
//! nodes, so tape order is a topological order and [`Tape::backward`] visits
//! each node once by walking the tape in reverse.

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, GradChecker};

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, BinaryOp};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Max,
    Matmul,
    Im2col,
    Conv2d,
    DepthwiseConv2d,
    BatchNorm,
    MaxPool,
    Upsample,
    PixelShuffle,
    Dropout,
    Relu,
    Softmax,
    Concat,
    Sum,
    Mean,
    Scale,
    Reshape,
    WeightedCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        Self::Leaf,
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::Max,
        Self::Matmul,
        Self::Im2col,
        Self::Conv2d,
        Self::DepthwiseConv2d,
        Self::BatchNorm,
        Self::MaxPool,
        Self::Upsample,
        Self::PixelShuffle,
        Self::Dropout,
        Self::Relu,
        Self::Softmax,
        Self::Concat,
        Self::Sum,
        Self::Mean,
        Self::Scale,
        Self::Reshape,
        Self::WeightedCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Leaf => "leaf",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Max => "max",
            Self::Matmul => "matmul",
            Self::Im2col => "im2col",
            Self::Conv2d => "conv2d",
            Self::DepthwiseConv2d => "depthwise_conv2d",
            Self::BatchNorm => "batch_norm",
            Self::MaxPool => "max_pool_2x2",
            Self::Upsample => "bilinear_upsample",
            Self::PixelShuffle => "pixel_shuffle",
            Self::Dropout => "dropout",
            Self::Relu => "relu",
            Self::Softmax => "softmax_channels",
            Self::Concat => "concat_channels",
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::Scale => "scale",
            Self::Reshape => "reshape",
            Self::WeightedCrossEntropy => "weighted_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op<T> {
    Leaf,
    Binary { op: BinaryOp, a: Var, b: Var },
    Matmul { a: Var, b: Var },
    Im2col { x: Var, k: usize, stride: usize, pad: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Depthwise { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T>, batch_stats: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var },
    PixelShuffle { x: Var, r: usize },
    Dropout { x: Var, mask: Vec<T> },
    Relu { x: Var },
    Softmax { x: Var },
    Concat { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    Scale { x: Var, factor: T },
    Reshape { x: Var },
    WeightedCe { probs: Var, labels: Vec<usize>, weights: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Self::Leaf => OpKind::Leaf,
            Self::Binary { op, .. } => match op {
                BinaryOp::Add => OpKind::Add,
                BinaryOp::Sub => OpKind::Sub,
                BinaryOp::Mul => OpKind::Mul,
                BinaryOp::Max => OpKind::Max,
            },
            Self::Matmul { .. } => OpKind::Matmul,
            Self::Im2col { .. } => OpKind::Im2col,
            Self::Conv2d { .. } => OpKind::Conv2d,
            Self::Depthwise { .. } => OpKind::DepthwiseConv2d,
            Self::BatchNorm { .. } => OpKind::BatchNorm,
            Self::MaxPool { .. } => OpKind::MaxPool,
            Self::Upsample { .. } => OpKind::Upsample,
            Self::PixelShuffle { .. } => OpKind::PixelShuffle,
            Self::Dropout { .. } => OpKind::Dropout,
            Self::Relu { .. } => OpKind::Relu,
            Self::Softmax { .. } => OpKind::Softmax,
            Self::Concat { .. } => OpKind::Concat,
            Self::Sum { .. } => OpKind::Sum,
            Self::Mean { .. } => OpKind::Mean,
            Self::Scale { .. } => OpKind::Scale,
            Self::Reshape { .. } => OpKind::Reshape,
            Self::WeightedCe { .. } => OpKind::WeightedCrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (divide-by-M) variance used for normalization.
    pub var: Vec<T>,
    /// Values per channel, `N·H·W`.
    pub count: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    corrupt: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            corrupt: None,
        }
    }

    /// Test hook: the backward rule of `kind` doubles every gradient it emits.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupt = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let value = kernels::binary(op, self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary { op, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b }, rg))
    }

    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::im2col(self.value(x), k, stride, pad)?;
        Ok(self.unary(x, value, Op::Im2col { x, k, stride, pad }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Per-channel "same" convolution; `w` is `[C, 1, k, k]` with `k` odd.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = kernels::depthwise_conv2d(self.value(x), self.value(w), self.value(b))?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Depthwise { x, w, b }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok((n, c, h * w))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (n, c, plane) = self.bn_check(x, gamma, beta)?;
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Tensor::zeros(xv.shape());
        let mut out = Tensor::zeros(xv.shape());
        for idx in 0..xv.numel() {
            let ch = (idx / plane) % c;
            let h = (xv.data()[idx] - mean[ch]) * inv_std[ch];
            xhat.data_mut()[idx] = h;
            out.data_mut()[idx] = h * g[ch] + b[ch];
        }
        debug_assert_eq!(xv.numel(), n * c * plane);
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Batch norm with batch statistics (training mode). Returns the output
    /// and the statistics so the caller can update running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, plane) = self.bn_check(x, gamma, beta)?;
        let count = n * plane;
        if count < 2 {
            return Err(Error::DegenerateBatch { per_channel: count });
        }
        let xd = self.value(x).data();
        let m = T::of(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let chan = || (0..n).flat_map(move |i| xd[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().copied());
            let mu = chan().sum::<T>() / m;
            mean[ch] = mu;
            var[ch] = chan().map(|v| (v - mu) * (v - mu)).sum::<T>() / m;
        }
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch norm with fixed (running) statistics (inference mode).
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var> {
        let (value, argmax) = kernels::max_pool_2x2(self.value(x))?;
        Ok(self.unary(x, value, Op::MaxPool { x, argmax }))
    }

    pub fn upsample_bilinear_2x(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let value = kernels::upsample_bilinear(self.value(x), 2 * h, 2 * w)?;
        Ok(self.unary(x, value, Op::Upsample { x }))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let value = kernels::pixel_shuffle(self.value(x), r)?;
        Ok(self.unary(x, value, Op::PixelShuffle { x, r }))
    }

    /// Inverted dropout: each element is zeroed with probability `rate`,
    /// survivors are scaled by `1/(1 − rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let value = Tensor::new(xv.shape(), xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect())?;
        Ok(self.unary(x, value, Op::Dropout { x, mask }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(x, value, Op::Relu { x })
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let value = kernels::softmax_channels(self.value(x))?;
        Ok(self.unary(x, value, Op::Softmax { x }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat_channels(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::of(xv.numel() as f64));
        self.unary(x, value, Op::Mean { x })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.unary(x, value, Op::Scale { x, factor })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape { x }))
    }

    /// Mean over pixels of `−w[label]·ln(max(p[label], 1e-12))`.
    ///
    /// `probs` is `[N, C, H, W]` (channel sums 1), `labels` is `[N, H, W]`.
    pub fn weighted_cross_entropy(&mut self, probs: Var, labels: &Tensor<u8>, weights: &[T]) -> Result<Var> {
        let (n, c, h, w) = self.value(probs).dims4()?;
        if labels.shape() != [n, h, w] {
            return Err(Error::ShapeMismatch {
                op: "weighted_cross_entropy",
                lhs: self.shape(probs).to_vec(),
                rhs: labels.shape().to_vec(),
            });
        }
        if weights.len() != c || weights.iter().any(|&wt| !(wt > T::zero())) {
            return Err(invalid(
                "weighted_cross_entropy",
                format!("need {c} positive class weights, got {}", weights.len()),
            ));
        }
        let plane = h * w;
        let pd = self.value(probs).data();
        let mut labels_flat = Vec::with_capacity(n * plane);
        let mut total = T::zero();
        for (idx, &l) in labels.data().iter().enumerate() {
            let l = l as usize;
            if l >= c {
                return Err(invalid(
                    "weighted_cross_entropy",
                    format!("label {l} out of range for {c} classes"),
                ));
            }
            let (i, p) = (idx / plane, idx % plane);
            let prob = pd[(i * c + l) * plane + p].max(T::of(1e-12));
            total = total - weights[l] * prob.ln();
            labels_flat.push(l);
        }
        let value = Tensor::scalar(total / T::of((n * plane) as f64));
        Ok(self.unary(
            probs,
            value,
            Op::WeightedCe {
                probs,
                labels: labels_flat,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Hash of every branch taken by a non-smooth op (relu sign, max-pool
    /// argmax, elementwise max selection). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::Binary {
                    op: BinaryOp::Max,
                    a,
                    b,
                } => {
                    if let Ok(d) = kernels::binary(BinaryOp::Sub, self.value(*a), self.value(*b)) {
                        for &v in d.data() {
                            (v >= T::zero()).hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Accumulate `d(root)/d(v)` for every node that requires a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.corrupt == Some(node.op.kind()) {
                g = g.map(|v| v + v);
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::Binary { op, a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let bx = kernels::expand_to(bv, av.shape())?;
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryOp::Mul => (
                        kernels::binary(BinaryOp::Mul, g, &bx)?,
                        kernels::binary(BinaryOp::Mul, g, av)?,
                    ),
                    BinaryOp::Max => {
                        let a_wins = |i: usize| av.data()[i] >= bx.data()[i];
                        (
                            Tensor::from_fn(g.shape(), |i| if a_wins(i) { g.data()[i] } else { T::zero() }),
                            Tensor::from_fn(g.shape(), |i| if a_wins(i) { T::zero() } else { g.data()[i] }),
                        )
                    }
                };
                if self.wants(a) {
                    self.accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    self.accumulate(grads, b, kernels::reduce_to(&gb, bv.shape())?);
                }
            }
            &Op::Matmul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(a) {
                    let mut ga = Tensor::zeros(av.shape());
                    kernels::gemm_nt(m, n, k, g.data(), bv.data(), ga.data_mut());
                    self.accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    kernels::gemm_tn(k, m, n, av.data(), g.data(), gb.data_mut());
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Im2col { x, k, stride, pad } => {
                let gx = kernels::col2im(g, self.shape(x), k, stride, pad)?;
                self.accumulate(grads, x, gx);
            }
            &Op::Conv2d { x, w, b, stride, pad } => {
                let cg = kernels::conv2d_backward(self.value(x), self.value(w), g, stride, pad, self.wants(x))?;
                if let Some(gx) = cg.input {
                    self.accumulate(grads, x, gx);
                }
                self.accumulate(grads, w, cg.weight);
                if let Some(b) = b {
                    self.accumulate(grads, b, cg.bias);
                }
            }
            &Op::Depthwise { x, w, b } => {
                let cg = kernels::depthwise_conv2d_backward(self.value(x), self.value(w), self.value(b), g)?;
                if let Some(gx) = cg.input {
                    self.accumulate(grads, x, gx);
                }
                self.accumulate(grads, w, cg.weight);
                self.accumulate(grads, b, cg.bias);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = xhat.dims4()?;
                let plane = h * w;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let range = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                        let gy = &g.data()[range.clone()];
                        dbeta[ch] = dbeta[ch] + gy.iter().copied().sum();
                        dgamma[ch] = dgamma[ch] + kernels::dot(gy, &xhat.data()[range]);
                    }
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xhat.shape());
                    let m = T::of((n * plane) as f64);
                    for i in 0..n {
                        for ch in 0..c {
                            let range = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for ((d, &gy), &xh) in dx.data_mut()[range.clone()]
                                .iter_mut()
                                .zip(&g.data()[range.clone()])
                                .zip(&xhat.data()[range])
                            {
                                *d = if *batch_stats {
                                    // d/dx of gamma·(x − μ)/σ with μ, σ depending on the batch.
                                    scale * (gy - dbeta[ch] / m - xh * dgamma[ch] / m)
                                } else {
                                    scale * gy
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] = gx.data()[src] + gv;
                }
                self.accumulate(grads, *x, gx);
            }
            &Op::Upsample { x } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let data = kernels::resize_planes_adjoint(g.data(), n * c, h, w, 2 * h, 2 * w);
                self.accumulate(grads, x, Tensor::new(&[n, c, h, w], data)?);
            }
            &Op::PixelShuffle { x, r } => {
                self.accumulate(grads, x, kernels::pixel_unshuffle(g, r)?);
            }
            Op::Dropout { x, mask } => {
                let gx = Tensor::new(g.shape(), g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect())?;
                self.accumulate(grads, *x, gx);
            }
            &Op::Relu { x } => {
                let xv = self.value(x);
                let gx = Tensor::from_fn(g.shape(), |i| {
                    if xv.data()[i] > T::zero() {
                        g.data()[i]
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, x, gx);
            }
            &Op::Softmax { x } => {
                // dx_c = p_c · (g_c − Σ_k g_k p_k) per pixel.
                let p = &node.value;
                let (n, c, h, w) = p.dims4()?;
                let plane = h * w;
                let mut gx = Tensor::zeros(p.shape());
                for i in 0..n {
                    for px in 0..plane {
                        let at = |ch: usize| (i * c + ch) * plane + px;
                        let inner: T = (0..c).map(|ch| g.data()[at(ch)] * p.data()[at(ch)]).sum();
                        for ch in 0..c {
                            gx.data_mut()[at(ch)] = p.data()[at(ch)] * (g.data()[at(ch)] - inner);
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::Concat { parts } => {
                let (n, _, h, w) = g.dims4()?;
                let plane = h * w;
                let total = g.shape()[1];
                let mut offset = 0;
                for &part in parts {
                    let pc = self.shape(part)[1];
                    if self.wants(part) {
                        let mut data = Vec::with_capacity(n * pc * plane);
                        for i in 0..n {
                            let start = (i * total + offset) * plane;
                            data.extend_from_slice(&g.data()[start..start + pc * plane]);
                        }
                        self.accumulate(grads, part, Tensor::new(&[n, pc, h, w], data)?);
                    }
                    offset += pc;
                }
            }
            &Op::Sum { x } => {
                self.accumulate(grads, x, Tensor::full(self.shape(x), g.item()));
            }
            &Op::Mean { x } => {
                let n = T::of(self.value(x).numel() as f64);
                self.accumulate(grads, x, Tensor::full(self.shape(x), g.item() / n));
            }
            &Op::Scale { x, factor } => {
                self.accumulate(grads, x, g.map(|v| v * factor));
            }
            &Op::Reshape { x } => {
                self.accumulate(grads, x, g.clone().reshape(self.shape(x))?);
            }
            Op::WeightedCe { probs, labels, weights } => {
                let pv = self.value(*probs);
                let (n, c, h, w) = pv.dims4()?;
                let plane = h * w;
                let scale = g.item() / T::of((n * plane) as f64);
                let floor = T::of(1e-12);
                let mut gp = Tensor::zeros(pv.shape());
                for (idx, &l) in labels.iter().enumerate() {
                    let at = ((idx / plane) * c + l) * plane + idx % plane;
                    let p = pv.data()[at];
                    if p > floor {
                        gp.data_mut()[at] = -scale * weights[l] / p;
                    }
                }
                self.accumulate(grads, *probs, gp);
            }
        }
        Ok(())
    }
}
