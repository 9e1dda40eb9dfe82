//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Nodes are appended in execution order, so the tape is already a
//! topological order; `backward` walks it once in reverse and accumulates
//! gradients additively into every input of each node.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::norm::{self, Reduction};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index into a parameter registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Operation kinds, used for per-kind execution counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Add,
    Relu,
    ChannelScale,
    ChannelShift,
    ChannelAffineConst,
    MaxPool,
    GlobalAvgPool,
    Normalize,
    SoftmaxCrossEntropy,
    Sum,
    Scale,
    DotConst,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Add(Vec<Var>),
    Relu(Var),
    ChannelScale { x: Var, s: Var },
    ChannelShift { x: Var, b: Var },
    ChannelAffineConst { x: Var, scale: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Normalize { x: Var, reduction: Reduction, inv_std: Vec<T> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Scale(Var, T),
    DotConst(Var, Tensor<T>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add(_) => OpKind::Add,
            Op::Relu(_) => OpKind::Relu,
            Op::ChannelScale { .. } => OpKind::ChannelScale,
            Op::ChannelShift { .. } => OpKind::ChannelShift,
            Op::ChannelAffineConst { .. } => OpKind::ChannelAffineConst,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Normalize { .. } => OpKind::Normalize,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::DotConst(..) => OpKind::DotConst,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    counts: HashMap<OpKind, usize>,
    grad_enabled: bool,
    consumed: bool,
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
            params: HashMap::new(),
            counts: HashMap::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape whose values can be read but which refuses `backward`.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of executed operations of `kind` so far.
    pub fn op_count(&self, kind: OpKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    /// Fingerprint of every piecewise-linear branch taken so far: the sign of
    /// each ReLU input and each max-pool argmax. Two passes with equal
    /// fingerprints lie on the same linear piece of those operations.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        *self.counts.entry(op.kind()).or_insert(0) += 1;
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Binds a parameter to a leaf. Binding the same id twice returns the
    /// existing leaf so that all uses share one gradient.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>, learnable: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone(), learnable);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), stride, pad)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Elementwise sum of one or more same-shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidConfig("add_n needs at least one term".into()))?;
        let mut acc = self.value(*first).clone();
        for t in rest {
            acc.add_assign(self.value(*t))?;
        }
        let rg = self.rg(terms);
        Ok(self.push(acc, Op::Add(terms.to_vec()), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// `x[n, c, :, :] * s[c]` with `s` a `(1, c, 1, 1)` tensor.
    pub fn channelwise_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = kernels::channelwise_scale(self.value(x), self.value(s).data())?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ChannelScale { x, s }, rg))
    }

    /// `x[n, c, :, :] + b[c]` with `b` a `(1, c, 1, 1)` tensor.
    pub fn channelwise_shift(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = kernels::channelwise_shift(self.value(x), self.value(b).data())?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::ChannelShift { x, b }, rg))
    }

    /// `(x[n, c] - offset[c]) * scale[c]` with constant vectors.
    pub fn channel_affine_const(&mut self, x: Var, offset: &[T], scale: &[T]) -> Result<Var> {
        let neg: Vec<T> = offset.iter().map(|&o| -o).collect();
        let shifted = kernels::channelwise_shift(self.value(x), &neg)?;
        let out = kernels::channelwise_scale(&shifted, scale)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::ChannelAffineConst {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool(self.value(x), k, stride, pad)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = kernels::global_avg_pool(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// Affine-free standardization over the units defined by `reduction`.
    /// Returns the normalized tensor and the per-unit means and variances.
    pub fn normalize(&mut self, x: Var, reduction: Reduction, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let stats = norm::standardize(self.value(x), reduction, eps)?;
        let rg = self.rg(&[x]);
        let v = self.push(
            stats.output,
            Op::Normalize {
                x,
                reduction,
                inv_std: stats.inv_std,
            },
            rg,
        );
        Ok((v, stats.mean, stats.var))
    }

    /// Mean softmax cross-entropy of `(n, classes, 1, 1)` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.h != 1 || s.w != 1 || labels.len() != s.n {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: s.dims(),
                right: [labels.len(), s.c, 1, 1],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= s.c) {
            return Err(Error::LabelOutOfRange { label, classes: s.c });
        }
        let (probs, loss) = softmax_xent(lv.data(), labels, s.c);
        let out = Tensor::from_vec([1, 1, 1, 1], vec![loss])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_shape(crate::tensor::Shape { n: 1, c: 1, h: 1, w: 1 }, vec![total]), Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Var {
        let out = self.value(x).scale(alpha);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, alpha), rg)
    }

    /// `sum(x * g)` for a constant `g` of the same shape, as a scalar.
    pub fn dot_const(&mut self, x: Var, g: &Tensor<T>) -> Result<Var> {
        self.value(x).check_same_shape(g, "dot_const")?;
        let total: T = self.value(x).data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[x]);
        let out = Tensor::from_vec([1, 1, 1, 1], vec![total])?;
        Ok(self.push(out, Op::DotConst(x, g.clone()), rg))
    }

    /// Back-propagates from a scalar `loss`. The tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::NoGradGraph);
        }
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let ls = self.value(loss).dims();
        if ls != [1, 1, 1, 1] {
            return Err(Error::NonScalarLoss(ls));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec([1, 1, 1, 1], vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (dx, dw) = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad)?;
                    accumulate(&mut grads, &self.nodes, *x, dx)?;
                    accumulate(&mut grads, &self.nodes, *w, dw)?;
                }
                Op::Add(terms) => {
                    for t in terms {
                        accumulate(&mut grads, &self.nodes, *t, g.clone())?;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *x, dx)?;
                }
                Op::ChannelScale { x, s } => {
                    let xv = self.value(*x);
                    let sv = self.value(*s);
                    let dx = kernels::channelwise_scale(&g, sv.data())?;
                    let prod: Vec<T> = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).collect();
                    let ds = kernels::channel_sums(&Tensor::from_shape(g.shape(), prod));
                    accumulate(&mut grads, &self.nodes, *x, dx)?;
                    accumulate(&mut grads, &self.nodes, *s, Tensor::channel_vector(ds)?)?;
                }
                Op::ChannelShift { x, b } => {
                    let db = kernels::channel_sums(&g);
                    accumulate(&mut grads, &self.nodes, *b, Tensor::channel_vector(db)?)?;
                    accumulate(&mut grads, &self.nodes, *x, g)?;
                }
                Op::ChannelAffineConst { x, scale } => {
                    let dx = kernels::channelwise_scale(&g, scale)?;
                    accumulate(&mut grads, &self.nodes, *x, dx)?;
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros_like(self.value(*x));
                    let d = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    accumulate(&mut grads, &self.nodes, *x, dx)?;
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(*x).shape();
                    let inv = T::one() / T::lit(xs.plane() as f64);
                    let mut dx = Vec::with_capacity(xs.numel());
                    for &gv in g.data() {
                        dx.extend(std::iter::repeat_n(gv * inv, xs.plane()));
                    }
                    accumulate(&mut grads, &self.nodes, *x, Tensor::from_shape(xs, dx))?;
                }
                Op::Normalize { x, reduction, inv_std } => {
                    let dx = norm::standardize_backward(&node.value, &g, inv_std, *reduction)?;
                    accumulate(&mut grads, &self.nodes, *x, dx)?;
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let upstream = g.data()[0];
                    let classes = probs.len() / labels.len();
                    let inv_n = T::one() / T::lit(labels.len() as f64);
                    let mut d = probs.clone();
                    for (row, &label) in d.chunks_mut(classes).zip(labels) {
                        row[label] -= T::one();
                        row.iter_mut().for_each(|v| *v *= inv_n * upstream);
                    }
                    let shape = self.value(*logits).shape();
                    accumulate(&mut grads, &self.nodes, *logits, Tensor::from_shape(shape, d))?;
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    let dx = Tensor::full(self.value(*x).dims(), gv)?;
                    accumulate(&mut grads, &self.nodes, *x, dx)?;
                }
                Op::Scale(x, alpha) => {
                    accumulate(&mut grads, &self.nodes, *x, g.scale(*alpha))?;
                }
                Op::DotConst(x, w) => {
                    accumulate(&mut grads, &self.nodes, *x, w.scale(g.data()[0]))?;
                }
            }
        }

        // Keep gradients only for leaves.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], target: Var, g: Tensor<T>) -> Result<()> {
    if !nodes[target.0].requires_grad {
        return Ok(());
    }
    match &mut grads[target.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Row-wise softmax with max subtraction, and the mean negative log-likelihood.
pub(crate) fn softmax_xent<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> (Vec<T>, T) {
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for (row, &label) in logits.chunks(classes).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        total += z.ln() - (row[label] - m);
        probs.extend(exps.iter().map(|&e| e / z));
    }
    (probs, total / T::lit(labels.len() as f64))
}

/// Gradients of the leaves of one differentiated tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Parameter gradient, zero-filled when the parameter was unreachable.
    pub fn param_or_zeros(&self, id: ParamId, like: &Tensor<T>) -> Tensor<T> {
        self.param(id).cloned().unwrap_or_else(|| Tensor::zeros_like(like))
    }
}
