//! Reverse-mode automatic differentiation over an append-only tape.

use rand::Rng;

use super::kernels;
use super::{Tensor, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Tape::log`] treats non-positive inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogMode {
    /// Clamp to `LOG_FLOOR` before taking the log; no gradient below it.
    Clamped,
    /// Reject any input `<= 0`.
    Strict,
}

enum Op<S> {
    Leaf,
    Conv1d { x: Var, w: Var, dilation: usize, col: Vec<S> },
    Linear { x: Var, w: Var },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<S> },
    Softmax { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: S },
    MulConst { x: Var, c: Vec<S> },
    Log { x: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations in execution order; node inputs always precede the
/// node itself, so a reverse sweep is a valid topological order.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// A fixed input (data, frozen parameters).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    /// The gradient of `v` as a tensor shaped like its value, zeros if unset.
    pub fn grad_tensor(&self, v: Var) -> Tensor<S> {
        let value = &self.nodes[v.0].value;
        match value.grad() {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
    }

    fn push_raw(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        debug_assert!(
            !inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) || value.all_finite(),
            "operation produced a non-finite value from finite inputs"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (out, col) = kernels::conv1d_forward(self.value(x), self.value(w), dilation)?;
        Ok(self.push(out, Op::Conv1d { x, w, dilation, col }, &[x, w]))
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(x), self.value(w))?;
        Ok(self.push(out, Op::Linear { x, w }, &[x, w]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = super::relu(self.value(x));
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool_forward(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Inverted dropout; returns `x` itself when it reduces to the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        let n = self.value(x).len();
        match kernels::dropout_mask::<S, R>(n, p, training, rng)? {
            None => Ok(x),
            Some(mask) => {
                let src = self.value(x);
                let data = src.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                let out = Tensor::new(src.shape().to_vec(), data)?;
                Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
            }
        }
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = kernels::softmax_forward(self.value(x));
        self.push(out, Op::Softmax { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = super::sum(self.value(x));
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = super::mean(self.value(x));
        self.push(out, Op::Mean { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |p, q| p + q);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |p, q| p - q);
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product of two same-shaped nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |p, q| p * q);
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<S>) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::shape("mul_const", format!("{:?} vs {:?}", self.value(x).shape(), c.shape())));
        }
        let out = zip_map(self.value(x), c, |p, q| p * q);
        Ok(self.push(out, Op::MulConst { x, c: c.data().to_vec() }, &[x]))
    }

    pub fn log(&mut self, x: Var, mode: LogMode) -> Result<Var> {
        let src = self.value(x);
        if mode == LogMode::Strict && src.data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::InvalidArgument("log of a non-positive value".into()));
        }
        let out = super::log_clamped(src);
        Ok(self.push(out, Op::Log { x }, &[x]))
    }

    /// Backpropagates from a one-element `loss`, adding into the gradients of
    /// every leaf that requires one. Calling it twice without
    /// [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv1d { x, w, dilation, col } => {
                    let (dx, dw) =
                        kernels::conv1d_backward(self.value(*x), self.value(*w), *dilation, col, &g, needs(x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if needs(w) {
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::Linear { x, w } => {
                    let (dx, dw) = kernels::linear_backward(self.value(*x), self.value(*w), &g, needs(x), needs(w));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::Relu { x } => {
                    let xs = self.value(*x).data();
                    let dx = g.iter().zip(xs).map(|(&d, &v)| if v > S::zero() { d } else { S::zero() }).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![S::zero(); self.value(*x).len()];
                    for (&i, &d) in argmax.iter().zip(&g) {
                        dx[i] += d;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let dx = g.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax { x } => {
                    let k = *node.value.shape().last().expect("rank >= 1");
                    let dx = kernels::softmax_backward(node.value.data(), &g, k);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum { x } => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean { x } => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0] / S::of(n as f64); n]);
                }
                Op::Add { a, b } => {
                    if needs(a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub { a, b } => {
                    if needs(b) {
                        accumulate(&mut grads, *b, g.iter().map(|&d| -d).collect());
                    }
                    if needs(a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if needs(a) {
                        accumulate(&mut grads, *a, g.iter().zip(vb).map(|(&d, &q)| d * q).collect());
                    }
                    if needs(b) {
                        accumulate(&mut grads, *b, g.iter().zip(va).map(|(&d, &p)| d * p).collect());
                    }
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.iter().map(|&d| d * *factor).collect());
                }
                Op::MulConst { x, c } => {
                    accumulate(&mut grads, *x, g.iter().zip(c).map(|(&d, &q)| d * q).collect());
                }
                Op::Log { x } => {
                    let floor = S::of(LOG_FLOOR);
                    let xs = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xs)
                        .map(|(&d, &v)| if v > floor { d / v } else { S::zero() })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
            }
        }

        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[idx];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
