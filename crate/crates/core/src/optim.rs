//! Adam with bias correction, and critic weight clipping.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;
/// Critic clipping bound.
pub const DEFAULT_CLIP: f64 = 0.01;

/// Moment buffers for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Reject non-finite gradients instead of propagating them.
    pub strict: bool,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// Zeroed moments shaped after `params`, default hyperparameters.
    pub fn new(params: &[&Tensor<S>]) -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            strict: true,
            step: 0,
            m: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.len()]).collect(),
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &S> {
        self.v.iter().flatten()
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(Error::shape("adam_step", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if self.strict && !g.all_finite() {
                return Err(Error::NonFinite("adam gradient"));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let (one_m_b1, one_m_b2) = (S::of(1.0 - self.beta1), S::of(1.0 - self.beta2));
        let bc1 = S::of(1.0 - self.beta1.powi(t));
        let bc2 = S::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (S::of(self.lr), S::of(self.eps));

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_m_b1 * gi;
                *vi = b2 * *vi + one_m_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Clamps every weight into `[-c, c]`.
pub fn clip<S: Scalar>(params: &mut [&mut Tensor<S>], c: f64) {
    let (lo, hi) = (S::of(-c), S::of(c));
    for p in params.iter_mut() {
        for w in p.data_mut() {
            *w = w.max(lo).min(hi);
        }
    }
}
