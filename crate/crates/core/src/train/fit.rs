//! The epoch loop with validation-based selection of test predictions.

use std::fmt::Write as _;
use std::path::Path;

use super::epochs::{train_addog_epoch, train_cnn_epoch, train_maddog_epoch, Trainer};
use super::{Method, Pools};
use crate::data::{Batch, Item};
use crate::error::{Error, Result};
use crate::experiments::uar_over_present;
use crate::fsio::write_atomic;
use crate::models::{ParamSet, N_CLASSES};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss_e: f64,
    pub loss_c: f64,
    pub critic_loss: f64,
    pub val_uar: f64,
    pub test_predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub records: Vec<EpochRecord>,
    /// Index into `records` of the best validation epoch (first on ties).
    pub selected: usize,
}

impl FitResult {
    pub fn selected_record(&self) -> &EpochRecord {
        &self.records[self.selected]
    }

    pub fn test_predictions(&self) -> &[usize] {
        &self.selected_record().test_predictions
    }
}

/// Class probabilities in inference mode, in pool order.
pub fn predict_probs<S: Scalar>(params: &ParamSet<S>, items: &[Item], batch: usize) -> Result<Vec<[f64; N_CLASSES]>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let refs: Vec<&Item> = chunk.iter().collect();
        let b = Batch::<S>::assemble(&refs)?;
        let probs = params.classifier.classify(&params.encoder.encode(&b.features, &b.lengths)?)?;
        for i in 0..chunk.len() {
            let r = probs.row(i);
            out.push([r[0].as_f64(), r[1].as_f64(), r[2].as_f64()]);
        }
    }
    Ok(out)
}

fn argmax(p: &[f64; N_CLASSES]) -> usize {
    (1..N_CLASSES).fold(0, |best, k| if p[k] > p[best] { k } else { best })
}

pub fn predict_classes<S: Scalar>(params: &ParamSet<S>, items: &[Item], batch: usize) -> Result<Vec<usize>> {
    Ok(predict_probs(params, items, batch)?.iter().map(argmax).collect())
}

/// Runs `config.epochs` epochs, scoring validation UAR and snapshotting
/// test predictions after each.
pub fn fit<S: Scalar>(trainer: &mut Trainer<S>, pools: &Pools) -> Result<FitResult> {
    if pools.val.is_empty() {
        return Err(Error::Train("empty validation set".into()));
    }
    let truths = pools
        .val
        .iter()
        .map(|it| it.label.map(|l| l.class()))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Train("validation utterance without a label".into()))?;
    let m = trainer.config.batch_size;
    let mut records = Vec::with_capacity(trainer.config.epochs);
    for epoch in 1..=trainer.config.epochs {
        let losses = match trainer.config.method {
            Method::Cnn => train_cnn_epoch(trainer, pools, false)?,
            Method::Sp => train_cnn_epoch(trainer, pools, true)?,
            Method::Addog => train_addog_epoch(trainer, pools)?,
            Method::Maddog => train_maddog_epoch(trainer, pools)?,
        };
        let val_uar = uar_over_present(&predict_classes(&trainer.params, &pools.val, m)?, &truths)?;
        let test_predictions = predict_classes(&trainer.params, &pools.test, m)?;
        log::debug!("{} epoch {epoch}: loss_E {:.4} loss_C {:.4} val {:.4}", trainer.config.method, losses.loss_e, losses.loss_c, val_uar);
        records.push(EpochRecord {
            epoch,
            loss_e: losses.loss_e,
            loss_c: losses.loss_c,
            critic_loss: losses.critic,
            val_uar,
            test_predictions,
        });
    }
    let selected = records
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r.val_uar > records[best].val_uar { i } else { best });
    Ok(FitResult { records, selected })
}

/// `epoch,loss_E,loss_C,val_uar` per epoch.
pub fn write_epoch_csv(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,loss_E,loss_C,val_uar\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.loss_e, r.loss_c, r.val_uar);
    }
    write_atomic(path, s.as_bytes())
}
