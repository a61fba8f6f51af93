//! Dense row-major tensors and the small operator set the networks need.
//!
//! Free functions in this module are the untracked forward kernels. The
//! [`Tape`] records the same kernels for reverse-mode differentiation, so a
//! tracked forward pass is bit-identical to an untracked one.

mod gradcheck;
mod kernels;
mod tape;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use gradcheck::{grad_check, grad_check_piecewise, GradCheckReport, Kink};
pub use tape::{LogMode, Tape, Var};

/// Floor applied by the clamped logarithm inside losses.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); n], grad: None }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![1], data: vec![v], grad: None }
    }

    /// 1-D tensor from a slice of `f64` literals.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| S::of(v)).collect())
    }

    pub fn vector(values: Vec<S>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", format!("{} vs {}", grad.len(), self.data.len())));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds `g` into the gradient buffer, creating it if needed.
    pub fn accumulate_grad(&mut self, g: &[S]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape("item", format!("tensor of shape {:?} is not a scalar", self.shape)))
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[S] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Valid-mode dilated cross-correlation.
///
/// `x` is `C_in x T` or `B x C_in x T`, `w` is `C_out x C_in x K`. The
/// output keeps the batch axis and has `T - dilation * (K - 1)` steps.
pub fn conv1d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, dilation: usize) -> Result<Tensor<S>> {
    kernels::conv1d_forward(x, w, dilation).map(|(out, _)| out)
}

/// `x * w^T` for `x` of shape `D_in` or `B x D_in` and `w` of shape `D_out x D_in`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    kernels::linear_forward(x, w)
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Maximum over the trailing time axis of a `C x T` or `B x C x T` tensor.
pub fn global_max_pool<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    kernels::max_pool_forward(x).map(|(out, _)| out)
}

/// Inverted dropout. With `training == false` or `p == 0` this is the identity.
pub fn dropout<S: Scalar, R: Rng + ?Sized>(
    x: &Tensor<S>,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<S>> {
    match kernels::dropout_mask::<S, R>(x.len(), p, training, rng)? {
        None => Ok(x.clone()),
        Some(mask) => Ok(Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
            grad: None,
        }),
    }
}

/// Softmax over the last axis of a `K` vector or `B x K` matrix.
pub fn softmax<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    kernels::softmax_forward(x)
}

pub fn sum<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor::scalar(x.data.iter().copied().sum())
}

pub fn mean<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor::scalar(x.data.iter().copied().sum::<S>() / S::of(x.len() as f64))
}

/// Natural log with the values below `LOG_FLOOR` clamped to it.
pub fn log_clamped<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let floor = S::of(LOG_FLOOR);
    x.map(|v| v.max(floor).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0], vec![]).is_err());
        assert_eq!(Tensor::<f64>::zeros(&[2, 3]).len(), 6);
    }

    #[test]
    fn conv1d_examples() {
        let out = conv1d(&t(&[1, 3], &[1., 2., 3.]), &t(&[1, 1, 1], &[2.]), 1).unwrap();
        assert_eq!(out.data(), &[2., 4., 6.]);

        let out = conv1d(&t(&[1, 3], &[3., 1., 4.]), &t(&[1, 1, 2], &[1., -1.]), 1).unwrap();
        assert_eq!(out.data(), &[2., -3.]);

        let out = conv1d(&t(&[1, 4], &[1., 2., 3., 4.]), &t(&[1, 1, 2], &[1., 1.]), 2).unwrap();
        assert_eq!(out.data(), &[4., 6.]);
        assert_eq!(out.shape(), &[1, 2]);
    }

    #[test]
    fn conv1d_rejects_short_input() {
        let err = conv1d(&t(&[1, 4], &[0.; 4]), &t(&[1, 1, 3], &[0.; 3]), 2).unwrap_err();
        match err {
            Error::TooShort { need, got, .. } => {
                assert_eq!(need, 5);
                assert_eq!(got, 4);
            }
            other => panic!("unexpected {other}"),
        }
        assert!(conv1d(&t(&[2, 4], &[0.; 8]), &t(&[1, 1, 1], &[0.]), 1).is_err());
    }

    #[test]
    fn conv1d_batched_matches_per_item() {
        let x = t(&[2, 2, 5], &(0..20).map(|v| (v as f64).sin()).collect::<Vec<_>>());
        let w = t(&[3, 2, 2], &(0..12).map(|v| (v as f64 * 0.7).cos()).collect::<Vec<_>>());
        let out = conv1d(&x, &w, 2).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3]);
        for b in 0..2 {
            let xb = Tensor::new(vec![2, 5], x.data()[b * 10..(b + 1) * 10].to_vec()).unwrap();
            let ob = conv1d(&xb, &w, 2).unwrap();
            assert_eq!(&out.data()[b * 9..(b + 1) * 9], ob.data());
        }
    }

    #[test]
    fn linear_examples() {
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(linear(&t(&[3], &[1., 2., 3.]), &eye).unwrap().data(), &[1., 2., 3.]);
        let w = t(&[2, 2], &[1., 1., 1., -1.]);
        assert_eq!(linear(&t(&[2], &[2., 3.]), &w).unwrap().data(), &[5., -1.]);
        let out = linear(&t(&[2, 2], &[2., 3., 1., 1.]), &w).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data(), &[5., -1., 2., 0.]);
        assert!(linear(&t(&[3], &[1., 2., 3.]), &w).is_err());
    }

    #[test]
    fn relu_and_pool() {
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        assert_eq!(global_max_pool(&t(&[1, 3], &[1., 5., 2.])).unwrap().data(), &[5.]);
        assert_eq!(global_max_pool(&t(&[2, 2], &[1., 2., 4., 3.])).unwrap().data(), &[2., 4.]);
        let pooled = global_max_pool(&t(&[2, 1, 2], &[1., 2., 4., 3.])).unwrap();
        assert_eq!(pooled.shape(), &[2, 1]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[3], &[0., 0., 0.]));
        for &v in s.data() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&t(&[3], &[1000., 0., 0.]));
        assert!(s.all_finite());
        assert_relative_eq!(s.data()[0], 1.0, epsilon = 1e-12);
        let s = softmax(&t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        for (v, e) in s.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert_relative_eq!(*v, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t(&[4], &[1., 2., 3., 4.]);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        // Monte-Carlo oracle: E[out] = x for inverted dropout.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = t(&[1], &[3.0]);
        let n = 100_000;
        let total: f64 =
            (0..n).map(|_| dropout(&x, 0.5, true, &mut rng).unwrap().data()[0]).sum();
        let mean = total / n as f64;
        // std of one draw is 3.0, so the standard error is ~0.0095.
        assert!((mean - 3.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn reductions() {
        let x = t(&[3], &[1., 2., 3.]);
        assert_eq!(mean(&x).item().unwrap(), 2.0);
        assert_eq!(sum(&x).item().unwrap(), 6.0);
        assert_eq!(log_clamped(&t(&[1], &[0.0])).data()[0], (1e-12f64).ln());
    }
}
