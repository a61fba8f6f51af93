//! One-epoch procedures and the update steps they share.

use super::losses::{
    critic_loss_addog_on, dsw_weights, maddog_critic_loss_on, own_dataset_mean_on, weighted_xent_on, Phase,
};
use super::{Method, Pools, TrainConfig};
use crate::data::{class_weights, sample_batch, Batch, EpochShuffle, Item, SampleMode};
use crate::error::{Error, Result};
use crate::models::{Mode, ParamGroup, ParamSet, N_CLASSES};
use crate::optim::{clip, AdamState};
use crate::scalar::Scalar;
use crate::seed::{rng_for, RunRng};
use crate::tensor::{Tape, Tensor, Var};

/// Reported after every critic update, once clipping has been applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStep {
    pub index: u64,
    pub loss: f64,
    pub max_abs: f64,
}

pub type CriticHook = Box<dyn FnMut(&CriticStep) + Send>;

/// Per-epoch means over encoder updates (`loss_e`, `loss_c`) and critic
/// updates (`critic`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLosses {
    pub loss_e: f64,
    pub loss_c: f64,
    pub critic: f64,
    pub batches: usize,
}

/// Weights of all three networks registered on one tape.
pub struct Bound {
    pub encoder: Vec<Var>,
    pub classifier: Vec<Var>,
    pub critic: Vec<Var>,
}

impl Bound {
    /// Encoder and classifier as leaves, the critic frozen.
    pub fn encoder_phase<S: Scalar>(tape: &mut Tape<S>, params: &ParamSet<S>) -> Self {
        Self {
            encoder: params.encoder.bind(tape, true),
            classifier: params.classifier.bind(tape, true),
            critic: params.critic.bind(tape, false),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Adversary {
    None,
    Addog,
    Maddog { n_datasets: usize, lambda: f64 },
}

/// Batches of one encoder/classifier update. Labelled batches carry their
/// class weights; `tar` is the unlabelled target batch.
pub struct EncoderBatches<'a, S> {
    pub src: Option<(&'a Batch<S>, [f64; N_CLASSES])>,
    pub tar: Option<&'a Batch<S>>,
    pub labeled: Option<(&'a Batch<S>, [f64; N_CLASSES])>,
}

pub struct Objective {
    pub total: Var,
    pub loss_e: Var,
    pub loss_c: Option<Var>,
}

/// Builds the encoder-phase loss. Dropout masks are drawn in the order
/// source, target, labelled target.
pub fn encoder_objective<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    batches: &EncoderBatches<'_, S>,
    adversary: Adversary,
    rng: &mut RunRng,
) -> Result<Objective> {
    let encode = |tape: &mut Tape<S>, b: &Batch<S>, rng: &mut RunRng| -> Result<Var> {
        let x = tape.constant(b.features.clone());
        params.encoder.forward(tape, &bound.encoder, x, &b.lengths, Mode::Train(rng))
    };
    let xent = |tape: &mut Tape<S>, reps: Var, b: &Batch<S>, w: &[f64; N_CLASSES]| -> Result<Var> {
        let probs = params.classifier.forward(tape, &bound.classifier, reps)?;
        let labels = b.labels.as_ref().ok_or_else(|| Error::Train("labelled batch without labels".into()))?;
        weighted_xent_on(tape, probs, labels, w)
    };

    let mut loss_e = None;
    let mut src_reps = None;
    if let Some((b, w)) = &batches.src {
        let r = encode(tape, b, rng)?;
        src_reps = Some(r);
        loss_e = Some(xent(tape, r, b, w)?);
    }
    let tar_reps = match batches.tar {
        Some(b) => Some(encode(tape, b, rng)?),
        None => None,
    };
    if let Some((b, w)) = &batches.labeled {
        let r = encode(tape, b, rng)?;
        let l = xent(tape, r, b, w)?;
        loss_e = Some(match loss_e {
            Some(e) => tape.add(e, l)?,
            None => l,
        });
    }
    let loss_e = loss_e.ok_or_else(|| Error::Train("encoder update without labelled data".into()))?;

    let adversarial = |tape: &mut Tape<S>| -> Result<(Var, Var)> {
        let (Some(s), Some(t)) = (src_reps, tar_reps) else {
            return Err(Error::Train("adversarial update needs source and target batches".into()));
        };
        let cs = params.critic.forward(tape, &bound.critic, s)?;
        let ct = params.critic.forward(tape, &bound.critic, t)?;
        Ok((cs, ct))
    };
    let (loss_c, total) = match adversary {
        Adversary::None => (None, loss_e),
        Adversary::Addog => {
            let (cs, ct) = adversarial(tape)?;
            let c = critic_loss_addog_on(tape, cs, ct, Phase::Encoder)?;
            (Some(c), tape.add(c, loss_e)?)
        }
        Adversary::Maddog { n_datasets, lambda } => {
            let (cs, ct) = adversarial(tape)?;
            let (sb, tb) = (batches.src.as_ref().expect("checked").0, batches.tar.expect("checked"));
            let ls = own_dataset_mean_on(tape, cs, &sb.dataset_onehots(n_datasets)?)?;
            let lt = own_dataset_mean_on(tape, ct, &tb.dataset_onehots(n_datasets)?)?;
            let c = tape.add(lt, ls)?;
            let weighted = tape.scale(c, S::of(lambda));
            (Some(c), tape.add(weighted, loss_e)?)
        }
    };
    Ok(Objective { total, loss_e, loss_c })
}

/// Parameters, optimiser states and random streams of one training run.
pub struct Trainer<S: Scalar> {
    pub config: TrainConfig,
    pub params: ParamSet<S>,
    pub adam_encoder: AdamState<S>,
    pub adam_classifier: AdamState<S>,
    pub adam_critic: AdamState<S>,
    sample_rng: RunRng,
    dropout_rng: RunRng,
    critic_steps: u64,
    hook: Option<CriticHook>,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh seeded initialisation; MADDoG gets one critic output per dataset.
    pub fn new(config: TrainConfig, n_datasets: usize) -> Result<Self> {
        config.validate()?;
        let outputs = match config.method {
            Method::Maddog if n_datasets < 2 => {
                return Err(Error::Train(format!("MADDoG needs at least 2 datasets, got {n_datasets}")))
            }
            Method::Maddog => n_datasets,
            _ => 1,
        };
        let params = ParamSet::init(config.seed, config.channels, outputs);
        Ok(Self::with_params(config, params))
    }

    pub fn with_params(config: TrainConfig, params: ParamSet<S>) -> Self {
        let adam = |ts: Vec<&Tensor<S>>| AdamState::new(&ts).with_lr(config.lr);
        Self {
            adam_encoder: adam(params.encoder.tensors()),
            adam_classifier: adam(params.classifier.tensors()),
            adam_critic: adam(params.critic.tensors()),
            sample_rng: rng_for(config.seed, "sample", 0),
            dropout_rng: rng_for(config.seed, "dropout", 0),
            critic_steps: 0,
            hook: None,
            params,
            config,
        }
    }

    pub fn set_critic_hook(&mut self, hook: CriticHook) {
        self.hook = Some(hook);
    }

    pub fn critic_steps(&self) -> u64 {
        self.critic_steps
    }

    fn apply_critic(&mut self, tape: &Tape<S>, vars: &[Var], loss: f64) -> Result<f64> {
        let grads: Vec<Tensor<S>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
        self.adam_critic.step(&mut self.params.critic.tensors_mut(), &grads)?;
        if let Some(c) = self.config.clip {
            clip(&mut self.params.critic.tensors_mut(), c);
        }
        self.critic_steps += 1;
        let max_abs = self.params.critic.max_abs().as_f64();
        if let Some(c) = self.config.clip {
            if max_abs > c {
                return Err(Error::Train(format!("critic weight {max_abs} exceeds clip bound {c}")));
            }
        }
        if let Some(hook) = self.hook.as_mut() {
            hook(&CriticStep { index: self.critic_steps, loss, max_abs });
        }
        Ok(loss)
    }

    /// One ADDoG critic update on fixed representations; returns the
    /// critic-phase loss before the update.
    pub fn critic_update_addog(&mut self, src: &Tensor<S>, tar: &Tensor<S>) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.critic.bind(&mut tape, true);
        let s = tape.constant(src.clone());
        let t = tape.constant(tar.clone());
        let cs = self.params.critic.forward(&mut tape, &vars, s)?;
        let ct = self.params.critic.forward(&mut tape, &vars, t)?;
        let loss = critic_loss_addog_on(&mut tape, cs, ct, Phase::Critic)?;
        tape.backward(loss)?;
        let value = tape.value(loss).item()?.as_f64();
        self.apply_critic(&tape, &vars, value)
    }

    /// One MADDoG critic update on fixed representations of a mixed batch.
    pub fn critic_update_maddog(&mut self, reps: &Tensor<S>, ds: &[usize], dsw: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.critic.bind(&mut tape, true);
        let r = tape.constant(reps.clone());
        let scores = self.params.critic.forward(&mut tape, &vars, r)?;
        let loss = maddog_critic_loss_on(&mut tape, scores, ds, dsw)?;
        tape.backward(loss)?;
        let value = tape.value(loss).item()?.as_f64();
        self.apply_critic(&tape, &vars, value)
    }

    /// Encoder update on the full objective and classifier update on its
    /// emotion term; returns `(loss_e, loss_c)`.
    pub fn encoder_update(&mut self, batches: &EncoderBatches<'_, S>, adversary: Adversary) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let bound = Bound::encoder_phase(&mut tape, &self.params);
        let obj = encoder_objective(&mut tape, &self.params, &bound, batches, adversary, &mut self.dropout_rng)?;
        // the critic term does not reach the classifier, so one backward
        // pass yields both parameter groups' gradients
        tape.backward(obj.total)?;
        let grads = |vars: &[Var]| vars.iter().map(|&v| tape.grad_tensor(v)).collect::<Vec<_>>();
        let (ge, gc) = (grads(&bound.encoder), grads(&bound.classifier));
        self.adam_encoder.step(&mut self.params.encoder.tensors_mut(), &ge)?;
        self.adam_classifier.step(&mut self.params.classifier.tensors_mut(), &gc)?;
        let loss_e = tape.value(obj.loss_e).item()?.as_f64();
        let loss_c = match obj.loss_c {
            Some(c) => tape.value(c).item()?.as_f64(),
            None => 0.0,
        };
        Ok((loss_e, loss_c))
    }

    fn draw(&mut self, pool: &[Item], sampler: &mut EpochShuffle) -> Result<Batch<S>> {
        sample_batch(pool, self.config.batch_size, sampler, &mut self.sample_rng)
    }

    fn sampler(&mut self, n: usize, mode: SampleMode) -> EpochShuffle {
        EpochShuffle::new(n, mode, &mut self.sample_rng)
    }

    fn encode_eval(&self, b: &Batch<S>) -> Result<Tensor<S>> {
        self.params.encoder.encode(&b.features, &b.lengths)
    }
}

fn weights_of(pool: &[Item]) -> Result<[f64; N_CLASSES]> {
    class_weights(pool.iter().filter_map(|i| i.label.as_ref()))
}

#[derive(Default)]
struct Means {
    e: f64,
    c: f64,
    critic: f64,
    n: usize,
    n_critic: usize,
}

impl Means {
    fn finish(self) -> EpochLosses {
        let div = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        EpochLosses { loss_e: div(self.e, self.n), loss_c: div(self.c, self.n), critic: div(self.critic, self.n_critic), batches: self.n }
    }
}

/// CNN (source plus labelled target) or SP (labelled target only) epoch:
/// one pass over the labelled pool in `ceil(n / m)` batches.
pub fn train_cnn_epoch<S: Scalar>(trainer: &mut Trainer<S>, pools: &Pools, sp_mode: bool) -> Result<EpochLosses> {
    let labeled: Vec<Item> = if sp_mode {
        pools.tar_labeled.clone()
    } else {
        pools.src.iter().chain(&pools.tar_labeled).cloned().collect()
    };
    if labeled.is_empty() {
        return Err(Error::Train(if sp_mode {
            "SP cannot be trained without labelled target data".into()
        } else {
            "no labelled training data".into()
        }));
    }
    let w = weights_of(&labeled)?;
    let n_batches = labeled.len().div_ceil(trainer.config.batch_size);
    let mut order = trainer.sampler(labeled.len(), SampleMode::EpochShuffle);
    let mut acc = Means::default();
    for _ in 0..n_batches {
        let b = trainer.draw(&labeled, &mut order)?;
        let (e, _) = trainer.encoder_update(&EncoderBatches { src: Some((&b, w)), tar: None, labeled: None }, Adversary::None)?;
        acc.e += e;
        acc.n += 1;
    }
    Ok(acc.finish())
}

/// Labelled target batch and weights, when the budget is nonzero.
fn labeled_setup<S: Scalar>(trainer: &mut Trainer<S>, pools: &Pools) -> Result<Option<([f64; N_CLASSES], EpochShuffle)>> {
    if pools.tar_labeled.is_empty() {
        return Ok(None);
    }
    let w = weights_of(&pools.tar_labeled)?;
    Ok(Some((w, trainer.sampler(pools.tar_labeled.len(), SampleMode::Uniform))))
}

/// ADDoG epoch: `max(1, floor(|SRC| / m))` iterations of `n_critic` critic
/// updates followed by one encoder/classifier update.
pub fn train_addog_epoch<S: Scalar>(trainer: &mut Trainer<S>, pools: &Pools) -> Result<EpochLosses> {
    if pools.src.is_empty() {
        return Err(Error::Train("ADDoG needs a labelled source pool".into()));
    }
    if pools.tar_unlabeled.is_empty() {
        return Err(Error::Train("ADDoG needs an unlabelled target pool".into()));
    }
    let m = trainer.config.batch_size;
    let sw = weights_of(&pools.src)?;
    let mut lab = labeled_setup(trainer, pools)?;
    let mut src_order = trainer.sampler(pools.src.len(), SampleMode::EpochShuffle);
    let mut src_any = trainer.sampler(pools.src.len(), SampleMode::Uniform);
    let mut tar_any = trainer.sampler(pools.tar_unlabeled.len(), SampleMode::Uniform);
    let mut acc = Means::default();
    for _ in 0..(pools.src.len() / m).max(1) {
        for _ in 0..trainer.config.n_critic {
            let sb = trainer.draw(&pools.src, &mut src_any)?;
            let tb = trainer.draw(&pools.tar_unlabeled, &mut tar_any)?;
            let (sr, tr) = (trainer.encode_eval(&sb)?, trainer.encode_eval(&tb)?);
            acc.critic += trainer.critic_update_addog(&sr, &tr)?;
            acc.n_critic += 1;
        }
        let sb = trainer.draw(&pools.src, &mut src_order)?;
        let tb = trainer.draw(&pools.tar_unlabeled, &mut tar_any)?;
        let lb = match lab.as_mut() {
            Some((w, sampler)) => Some((trainer.draw(&pools.tar_labeled, sampler)?, *w)),
            None => None,
        };
        let batches = EncoderBatches { src: Some((&sb, sw)), tar: Some(&tb), labeled: lb.as_ref().map(|(b, w)| (b, *w)) };
        let (e, c) = trainer.encoder_update(&batches, Adversary::Addog)?;
        acc.e += e;
        acc.c += c;
        acc.n += 1;
    }
    Ok(acc.finish())
}

/// MADDoG epoch: `max(1, floor((|SRC| + |TAR|) / m))` iterations; critic
/// batches are consecutive slices of a shuffle over source and target.
pub fn train_maddog_epoch<S: Scalar>(trainer: &mut Trainer<S>, pools: &Pools) -> Result<EpochLosses> {
    let d = pools.n_datasets;
    if d < 2 {
        return Err(Error::Train(format!("MADDoG needs at least 2 datasets, got {d}")));
    }
    if trainer.params.critic.outputs() != d {
        return Err(Error::Train(format!("critic has {} outputs for {d} datasets", trainer.params.critic.outputs())));
    }
    if pools.src.is_empty() || pools.tar_unlabeled.is_empty() {
        return Err(Error::Train("MADDoG needs source and unlabelled target pools".into()));
    }
    let m = trainer.config.batch_size;
    let all: Vec<Item> = pools.src.iter().chain(&pools.tar_unlabeled).cloned().collect();
    let mut counts = vec![0usize; d];
    for it in &all {
        counts[it.dataset] += 1;
    }
    let dsw = dsw_weights(&counts)?;
    let sw = weights_of(&pools.src)?;
    let mut lab = labeled_setup(trainer, pools)?;
    let mut all_order = trainer.sampler(all.len(), SampleMode::EpochShuffle);
    let mut src_order = trainer.sampler(pools.src.len(), SampleMode::EpochShuffle);
    let mut tar_any = trainer.sampler(pools.tar_unlabeled.len(), SampleMode::Uniform);
    let adversary = Adversary::Maddog { n_datasets: d, lambda: trainer.config.lambda };
    let mut acc = Means::default();
    for _ in 0..(all.len() / m).max(1) {
        for _ in 0..trainer.config.n_critic {
            let b = trainer.draw(&all, &mut all_order)?;
            let reps = trainer.encode_eval(&b)?;
            acc.critic += trainer.critic_update_maddog(&reps, &b.datasets, &dsw)?;
            acc.n_critic += 1;
        }
        let sb = trainer.draw(&pools.src, &mut src_order)?;
        let tb = trainer.draw(&pools.tar_unlabeled, &mut tar_any)?;
        let lb = match lab.as_mut() {
            Some((w, sampler)) => Some((trainer.draw(&pools.tar_labeled, sampler)?, *w)),
            None => None,
        };
        let batches = EncoderBatches { src: Some((&sb, sw)), tar: Some(&tb), labeled: lb.as_ref().map(|(b, w)| (b, *w)) };
        let (e, c) = trainer.encoder_update(&batches, adversary)?;
        acc.e += e;
        acc.c += c;
        acc.n += 1;
    }
    Ok(acc.finish())
}
