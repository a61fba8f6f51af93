//! Finite-difference check of the full ADDoG encoder-phase objective.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::epochs::{encoder_objective, Adversary, Bound, EncoderBatches};
use crate::data::{Batch, Item, SoftLabel};
use crate::error::Result;
use crate::features::FeatureMatrix;
use crate::models::{ParamGroup, ParamSet, N_CLASSES, N_MELS};
use crate::seed::rng_for;
use crate::tensor::{grad_check_piecewise, GradCheckReport, Tensor};

pub const CHECK_EPS: f64 = 1e-5;
pub const CHECK_TOLERANCE: f64 = 1e-4;

/// Tiny instance: `utterances` per batch of up to `frames` frames, random
/// features and soft labels, `channels`-wide networks.
pub struct CheckInstance {
    pub params: ParamSet<f64>,
    pub src: Batch<f64>,
    pub tar: Batch<f64>,
    pub labeled: Batch<f64>,
    pub seed: u64,
}

impl CheckInstance {
    pub fn new(seed: u64, utterances: usize, frames: usize, channels: usize) -> Result<Self> {
        let mut rng = rng_for(seed, "gradcheck", 0);
        let mut batch = |labeled: bool| -> Result<Batch<f64>> {
            let items: Vec<Item> = (0..utterances)
                .map(|i| {
                    // vary lengths so zero padding is part of the graph
                    let t = frames - i.min(frames.saturating_sub(crate::models::RECEPTIVE_FIELD)).min(3);
                    let data = (0..t * N_MELS).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
                    let fm = FeatureMatrix::new(t, N_MELS, data.iter().map(|&v| v as f32).collect())?;
                    let label = if labeled {
                        let w: [f64; N_CLASSES] = std::array::from_fn(|_| rng.random_range(0.1..1.0));
                        let s: f64 = w.iter().sum();
                        Some(SoftLabel::from_probs(w.map(|v| v / s))?)
                    } else {
                        None
                    };
                    Ok(Item { features: Arc::new(fm), dataset: usize::from(!labeled), label })
                })
                .collect::<Result<_>>()?;
            Batch::assemble(&items.iter().collect::<Vec<_>>())
        };
        let src = batch(true)?;
        let tar = batch(false)?;
        let labeled = batch(true)?;
        Ok(Self { params: ParamSet::init(seed, channels, 1), src, tar, labeled, seed })
    }

    /// All weights in encoder, classifier, critic order.
    pub fn tensors(&self) -> Vec<Tensor<f64>> {
        let p = &self.params;
        p.encoder.tensors().into_iter().chain(p.classifier.tensors()).chain(p.critic.tensors()).cloned().collect()
    }

    /// Checks `loss_C + loss_E` against central differences in every
    /// weight of all three networks, with dropout reseeded per evaluation.
    pub fn check(&self) -> Result<GradCheckReport> {
        let w = [1.0, 1.3, 0.8];
        let f = |tape: &mut crate::tensor::Tape<f64>, vars: &[crate::tensor::Var]| {
            let bound = Bound { encoder: vars[0..2].to_vec(), classifier: vars[2..5].to_vec(), critic: vars[5..8].to_vec() };
            let batches = EncoderBatches { src: Some((&self.src, w)), tar: Some(&self.tar), labeled: Some((&self.labeled, w)) };
            let mut rng = rng_for(self.seed, "gradcheck-dropout", 0);
            Ok(encoder_objective(tape, &self.params, &bound, &batches, Adversary::Addog, &mut rng)?.total)
        };
        grad_check_piecewise(f, &self.tensors(), CHECK_EPS, CHECK_TOLERANCE)
    }
}

/// The acceptance-size instance: 2 utterances of 30 frames, 8 channels.
pub fn addog_grad_check(seed: u64) -> Result<GradCheckReport> {
    CheckInstance::new(seed, 2, 30, 8)?.check()
}
