//! Reverse-mode differentiation over a recorded operation graph.
//!
//! Every operation appends a node holding its output value plus whatever the
//! backward rule needs (pooling indices, normalized activations, dropout
//! masks). [`Graph::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order because inputs always precede outputs.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, BatchStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batchnorm node normalizes.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Batch statistics; the node reports them for running-average updates.
    Train,
    /// Fixed running statistics.
    Eval { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    Deconv2d { x: Var, w: Var, b: Var, stride: usize },
    BatchNorm { x: Var, scale: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: Var },
    MaxPool { x: Var, idx: Vec<usize> },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Dropout { x: Var, mask: Vec<T> },
    SoftmaxXent { logits: Var, probs: Tensor<T>, labels: Vec<usize> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleBy { x: Var, s: Var },
    AddScaled { base: Var, s: Var, x: Var },
    Lerp { from: Var, to: Var, s: Var },
    ScaleConst { x: Var, c: T },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a constant (`requires_grad == false`) or a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        match vars.iter().find(|v| v.0 >= self.nodes.len()) {
            Some(v) => Err(Error::Usage(format!("variable {} does not belong to this graph", v.0))),
            None => Ok(()),
        }
    }

    fn scalar_of(&self, s: Var) -> Result<T> {
        let t = self.value(s);
        if t.len() != 1 {
            return Err(shape_err!("expected a single-element scale, got {:?}", t.shape()));
        }
        Ok(t.data()[0])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(&[x, w, b])?;
        let y = kernels::conv2d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.check(&[x, w, b])?;
        let y = kernels::deconv2d(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(y, Op::Deconv2d { x, w, b, stride }, &[x, w, b]))
    }

    /// Batchnorm node. In train mode the batch statistics are returned as well.
    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.check(&[x, scale, shift])?;
        let (xv, sv, hv) = (self.value(x), self.value(scale), self.value(shift));
        let (out, train) = match mode {
            NormMode::Train => (kernels::batchnorm_train_full(xv, sv, hv)?, true),
            NormMode::Eval { mean, var } => {
                (kernels::batchnorm_eval_full(xv, sv, hv, mean, var)?, false)
            }
        };
        let op = Op::BatchNorm { x, scale, shift, xhat: out.xhat, inv_std: out.inv_std, train };
        Ok((self.push(out.y, op, &[x, scale, shift]), out.stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let y = kernels::relu(self.value(x));
        Ok(self.push(y, Op::Relu { x }, &[x]))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let (y, idx) = kernels::maxpool2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, idx }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let y = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(&[x, w, b])?;
        let y = kernels::fully_connected(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Train-mode inverted dropout. Callers skip this node entirely in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        self.check(&[x])?;
        kernels::check_dropout_p(p)?;
        if p == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let mask = kernels::dropout_mask::<T, R>(xv.len(), p, rng)?;
        let y = xv.with_data(xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect());
        Ok(self.push(y, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean softmax cross-entropy; produces a `[1]` node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(&[logits])?;
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let op = Op::SoftmaxXent { logits, probs, labels: labels.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check(&[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape(bv)?;
        Ok(av.with_data(av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, |x, y| x + y)?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, |x, y| x - y)?;
        Ok(self.push(y, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, |x, y| x * y)?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    /// `s * x` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(&[x, s])?;
        let k = self.scalar_of(s)?;
        let y = self.value(x).map(|v| k * v);
        Ok(self.push(y, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// `base + s * x` for a single-element `s`.
    pub fn add_scaled(&mut self, base: Var, s: Var, x: Var) -> Result<Var> {
        self.check(&[s])?;
        let k = self.scalar_of(s)?;
        let y = self.zip_same(base, x, |b, v| b + k * v)?;
        Ok(self.push(y, Op::AddScaled { base, s, x }, &[base, s, x]))
    }

    /// `(1 - s) * from + s * to` for a single-element `s`.
    pub fn lerp(&mut self, from: Var, to: Var, s: Var) -> Result<Var> {
        self.check(&[s])?;
        let k = self.scalar_of(s)?;
        let y = self.zip_same(from, to, |f, t| (T::one() - k) * f + k * t)?;
        Ok(self.push(y, Op::Lerp { from, to, s }, &[from, to, s]))
    }

    pub fn scale_const(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(&[x])?;
        let y = self.value(x).map(|v| c * v);
        Ok(self.push(y, Op::ScaleConst { x, c }, &[x]))
    }

    /// Sum of all elements as a `[1]` node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let y = Tensor::scalar(self.value(x).sum());
        Ok(self.push(y, Op::Sum { x }, &[x]))
    }

    /// Gradients of the single-element `loss` with respect to every leaf
    /// created with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called on a variable with no recorded forward".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let g = kernels::conv2d_backward(self.value(*x), self.value(*w), gy)?;
                acc(*x, g.input);
                acc(*w, g.weight);
                acc(*b, g.bias);
            }
            Op::Deconv2d { x, w, b, stride } => {
                let g = kernels::deconv2d_backward(self.value(*x), self.value(*w), gy, *stride)?;
                acc(*x, g.input);
                acc(*w, g.weight);
                acc(*b, g.bias);
            }
            Op::BatchNorm { x, scale, shift, xhat, inv_std, train } => {
                let (gx, gs, gb) =
                    kernels::batchnorm_backward(gy, self.value(*scale), xhat, inv_std, *train)?;
                acc(*x, gx);
                acc(*scale, gs);
                acc(*shift, gb);
            }
            Op::Relu { x } => {
                let g = gy.with_data(
                    gy.data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                        .collect(),
                );
                acc(*x, g);
            }
            Op::MaxPool { x, idx } => {
                let xv = self.value(*x);
                let mut g = vec![T::zero(); xv.len()];
                for (&j, &gv) in idx.iter().zip(gy.data()) {
                    g[j] += gv;
                }
                acc(*x, xv.with_data(g));
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let [_, _, h, w] = xv.dims4()?;
                let n = T::cast((h * w) as f64);
                let mut g = Vec::with_capacity(xv.len());
                for &gv in gy.data() {
                    g.extend(std::iter::repeat_n(gv / n, h * w));
                }
                acc(*x, xv.with_data(g));
            }
            Op::Linear { x, w, b } => {
                let g = kernels::fully_connected_backward(self.value(*x), self.value(*w), gy)?;
                acc(*x, g.input);
                acc(*w, g.weight);
                acc(*b, g.bias);
            }
            Op::Dropout { x, mask } => {
                acc(*x, gy.with_data(gy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect()));
            }
            Op::SoftmaxXent { logits, probs, labels } => {
                let [batch, k] = probs.dims2()?;
                let scale = gy.data()[0] / T::cast(batch as f64);
                let mut g: Vec<T> = probs.data().iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    g[row * k + label] -= scale;
                }
                acc(*logits, probs.with_data(g));
            }
            Op::Add { a, b } => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub { a, b } => {
                acc(*a, gy.clone());
                if wants(*b) {
                    acc(*b, gy.map(|g| -g));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    acc(*a, gy.with_data(gy.data().iter().zip(bv.data()).map(|(&g, &v)| g * v).collect()));
                }
                if wants(*b) {
                    acc(*b, gy.with_data(gy.data().iter().zip(av.data()).map(|(&g, &v)| g * v).collect()));
                }
            }
            Op::ScaleBy { x, s } => {
                let k = self.scalar_of(*s)?;
                if wants(*x) {
                    acc(*x, gy.map(|g| g * k));
                }
                if wants(*s) {
                    acc(*s, Tensor::scalar(gy.dot(self.value(*x))?));
                }
            }
            Op::AddScaled { base, s, x } => {
                let k = self.scalar_of(*s)?;
                acc(*base, gy.clone());
                if wants(*x) {
                    acc(*x, gy.map(|g| g * k));
                }
                if wants(*s) {
                    acc(*s, Tensor::scalar(gy.dot(self.value(*x))?));
                }
            }
            Op::Lerp { from, to, s } => {
                let k = self.scalar_of(*s)?;
                if wants(*from) {
                    acc(*from, gy.map(|g| g * (T::one() - k)));
                }
                if wants(*to) {
                    acc(*to, gy.map(|g| g * k));
                }
                if wants(*s) {
                    let (fv, tv) = (self.value(*from), self.value(*to));
                    let d: T = gy
                        .data()
                        .iter()
                        .zip(fv.data().iter().zip(tv.data()))
                        .map(|(&g, (&f, &t))| g * (t - f))
                        .sum();
                    acc(*s, Tensor::scalar(d));
                }
            }
            Op::ScaleConst { x, c } => acc(*x, gy.map(|g| g * *c)),
            Op::Sum { x } => {
                let xv = self.value(*x);
                acc(*x, xv.with_data(vec![gy.data()[0]; xv.len()]));
            }
        }
        Ok(())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, `None` when the leaf is constant or unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
