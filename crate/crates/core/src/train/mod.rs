//! Losses and training procedures for the CNN and SP baselines, ADDoG and
//! MADDoG, plus the epoch loop with validation-based model selection.

mod check;
mod epochs;
mod fit;
pub mod losses;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::data::{Corpus, FoldPlan, Item};
use crate::error::{Error, Result};
use crate::models::DEFAULT_CHANNELS;
use crate::optim::{DEFAULT_CLIP, DEFAULT_LR};

pub use check::{addog_grad_check, CheckInstance, CHECK_EPS, CHECK_TOLERANCE};
pub use epochs::{
    encoder_objective, train_addog_epoch, train_cnn_epoch, train_maddog_epoch, Adversary, Bound, CriticHook,
    CriticStep, EncoderBatches, EpochLosses, Objective, Trainer,
};
pub use fit::{fit, predict_classes, predict_probs, write_epoch_csv, EpochRecord, FitResult};

pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_N_CRITIC: usize = 5;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_EPOCHS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Cnn,
    Sp,
    Addog,
    Maddog,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cnn, Method::Sp, Method::Addog, Method::Maddog];

    pub fn has_critic(self) -> bool {
        matches!(self, Method::Addog | Method::Maddog)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cnn => "CNN",
            Method::Sp => "SP",
            Method::Addog => "ADDoG",
            Method::Maddog => "MADDoG",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected CNN, SP, ADDoG or MADDoG)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub n_critic: usize,
    /// Critic weight bound; `None` disables clipping (test harnesses only).
    pub clip: Option<f64>,
    /// Weight of the critic term in the MADDoG encoder loss.
    pub lambda: f64,
    pub epochs: usize,
    pub channels: usize,
    pub seed: u64,
    pub lr: f64,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            batch_size: DEFAULT_BATCH,
            n_critic: DEFAULT_N_CRITIC,
            clip: Some(DEFAULT_CLIP),
            lambda: DEFAULT_LAMBDA,
            epochs: DEFAULT_EPOCHS,
            channels: DEFAULT_CHANNELS,
            seed,
            lr: DEFAULT_LR,
        }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch size", self.batch_size),
            ("n_critic", self.n_critic),
            ("epochs", self.epochs),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0) || !(self.lambda >= 0.0) || self.clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("learning rate and clip must be positive, lambda non-negative".into()));
        }
        Ok(())
    }
}

/// What a training run is allowed to see: labels only on the training and
/// validation folds. Dataset ids are compacted to `0..n_datasets` in
/// corpus order.
#[derive(Clone, Debug)]
pub struct Pools {
    pub src: Vec<Item>,
    pub tar_labeled: Vec<Item>,
    pub tar_unlabeled: Vec<Item>,
    pub val: Vec<Item>,
    pub test: Vec<Item>,
    pub n_datasets: usize,
}

impl Pools {
    pub fn from_plan(corpus: &Corpus, plan: &FoldPlan) -> Result<Self> {
        plan.validate()?;
        let all = [&plan.train_src, &plan.train_tar_labeled, &plan.val, &plan.test, &plan.unlabeled_tar_pool];
        let mut compact = BTreeMap::new();
        for &id in all.iter().flat_map(|v| v.iter()) {
            let u = corpus
                .utterances
                .get(id)
                .ok_or_else(|| Error::Data(format!("fold references utterance {id} outside the corpus")))?;
            compact.insert(u.dataset, 0);
        }
        for (i, v) in compact.values_mut().enumerate() {
            *v = i;
        }
        let item = |id: usize, labeled: bool| -> Result<Item> {
            let u = &corpus.utterances[id];
            let label = if labeled {
                Some(u.label.ok_or_else(|| Error::Label(format!("utterance {} has no label", u.id)))?)
            } else {
                None
            };
            Ok(Item { features: u.features.clone(), dataset: compact[&u.dataset], label })
        };
        let build = |ids: &[usize], labeled: bool| ids.iter().map(|&id| item(id, labeled)).collect::<Result<Vec<_>>>();
        Ok(Self {
            src: build(&plan.train_src, true)?,
            tar_labeled: build(&plan.train_tar_labeled, true)?,
            tar_unlabeled: build(&plan.unlabeled_tar_pool, false)?,
            val: build(&plan.val, true)?,
            test: build(&plan.test, false)?,
            n_datasets: compact.len(),
        })
    }
}
