//! Adversarial domain generalization for cross-corpus utterance
//! classification.
//!
//! The crate covers the whole pipeline: WAV loading and resampling, log-mel
//! filterbank features, soft valence labels and fold plans, a small
//! reverse-mode autodiff engine, the convolutional encoder / classifier /
//! critic networks, the CNN, SP, ADDoG and MADDoG training procedures, and
//! the experiment harness that turns test predictions into per-subject UAR
//! reports. A synthetic domain-shift corpus generator stands in for
//! restricted-access corpora.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); training uses
//! `f64`, and the aliases below name the concrete types.

pub mod audio;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod features;
pub mod fsio;
pub mod models;
pub mod optim;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar used for all training and gradient checks.
pub type Real = f64;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tensor::Tape<f64>;
pub type ParamSet64 = models::ParamSet<f64>;
pub type Adam64 = optim::AdamState<f64>;
pub type Trainer64 = train::Trainer<f64>;
