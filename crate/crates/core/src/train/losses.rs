//! Training objectives. Each loss has a tape form (for training) and a
//! value form over plain tensors.

use crate::error::{Error, Result};
use crate::models::N_CLASSES;
use crate::scalar::Scalar;
use crate::tensor::{LogMode, Tape, Tensor, Var};

/// Which side of the adversarial game an ADDoG critic loss serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// `mean C(S) - mean C(T)`, minimised by the critic.
    Critic,
    /// `mean C(T) - mean C(S)`, minimised by the encoder.
    Encoder,
}

fn check_rows<S: Scalar>(op: &'static str, t: &Tensor<S>, cols: usize) -> Result<usize> {
    match t.shape() {
        [b, c] if *c == cols && *b > 0 => Ok(*b),
        s => Err(Error::shape(op, format!("expected B x {cols}, got {s:?}"))),
    }
}

/// `-(1/B) sum_i sum_k y_ik w_k log p_ik` with the log clamped.
pub fn weighted_xent_on<S: Scalar>(
    tape: &mut Tape<S>,
    probs: Var,
    labels: &Tensor<S>,
    w: &[f64; N_CLASSES],
) -> Result<Var> {
    let b = check_rows("weighted_xent", labels, N_CLASSES)?;
    if tape.value(probs).shape() != labels.shape() {
        return Err(Error::shape(
            "weighted_xent",
            format!("probs {:?} vs labels {:?}", tape.value(probs).shape(), labels.shape()),
        ));
    }
    let yw = Tensor::new(
        labels.shape().to_vec(),
        labels.data().iter().enumerate().map(|(i, &y)| y * S::of(w[i % N_CLASSES])).collect(),
    )?;
    let lp = tape.log(probs, LogMode::Clamped)?;
    let prod = tape.mul_const(lp, &yw)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, S::of(-1.0 / b as f64)))
}

pub fn weighted_xent<S: Scalar>(probs: &Tensor<S>, labels: &Tensor<S>, w: &[f64; N_CLASSES]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = weighted_xent_on(&mut tape, p, labels, w)?;
    Ok(tape.value(l).item()?.as_f64())
}

/// ADDoG critic loss over `B x 1` score columns.
pub fn critic_loss_addog_on<S: Scalar>(tape: &mut Tape<S>, src: Var, tar: Var, phase: Phase) -> Result<Var> {
    let ms = tape.mean(src);
    let mt = tape.mean(tar);
    match phase {
        Phase::Critic => tape.sub(ms, mt),
        Phase::Encoder => tape.sub(mt, ms),
    }
}

pub fn critic_loss_addog(src: &[f64], tar: &[f64], phase: Phase) -> Result<f64> {
    if src.len() != tar.len() || src.is_empty() {
        return Err(Error::shape("critic_loss_addog", format!("{} vs {} scores", src.len(), tar.len())));
    }
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::vector(src.to_vec())?);
    let t = tape.constant(Tensor::vector(tar.to_vec())?);
    let l = critic_loss_addog_on(&mut tape, s, t, phase)?;
    tape.value(l).item()
}

/// One-vs-all weights `(N - n_d) / n_d`.
pub fn dsw_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(d) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("dataset {d} has no utterances in the critic pool")));
    }
    let n: usize = counts.iter().sum();
    Ok(counts.iter().map(|&c| (n - c) as f64 / c as f64).collect())
}

/// The `B x D` multiplier that flips and weights each row's own column.
fn flip_matrix<S: Scalar>(ds: &[usize], dsw: &[f64]) -> Result<Tensor<S>> {
    let d = dsw.len();
    let mut m = vec![S::one(); ds.len() * d];
    for (i, &k) in ds.iter().enumerate() {
        if k >= d {
            return Err(Error::Data(format!("dataset index {k} out of range {d}")));
        }
        m[i * d + k] = S::of(-dsw[k]);
    }
    Tensor::new(vec![ds.len(), d], m)
}

/// Mean over all `B x D` entries after flipping each row's own column.
pub fn maddog_critic_loss_on<S: Scalar>(tape: &mut Tape<S>, scores: Var, ds: &[usize], dsw: &[f64]) -> Result<Var> {
    check_rows("maddog_critic_loss", tape.value(scores), dsw.len())?;
    if tape.value(scores).shape()[0] != ds.len() {
        return Err(Error::shape("maddog_critic_loss", "one dataset index per row"));
    }
    let flipped = tape.mul_const(scores, &flip_matrix(ds, dsw)?)?;
    Ok(tape.mean(flipped))
}

pub fn maddog_critic_loss<S: Scalar>(scores: &Tensor<S>, ds: &[usize], dsw: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let l = maddog_critic_loss_on(&mut tape, s, ds, dsw)?;
    Ok(tape.value(l).item()?.as_f64())
}

/// Mean own-dataset score of one batch (`B x D` scores, `B x D` one-hots).
pub fn own_dataset_mean_on<S: Scalar>(tape: &mut Tape<S>, scores: Var, onehots: &Tensor<S>) -> Result<Var> {
    let b = check_rows("maddog_encoder_critic_loss", onehots, tape.value(scores).shape().get(1).copied().unwrap_or(0))?;
    let sel = tape.mul_const(scores, onehots)?;
    let total = tape.sum(sel);
    Ok(tape.scale(total, S::of(1.0 / b as f64)))
}

pub fn maddog_encoder_critic_loss<S: Scalar>(
    src: &Tensor<S>,
    src_onehots: &Tensor<S>,
    tar: &Tensor<S>,
    tar_onehots: &Tensor<S>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(src.clone());
    let t = tape.constant(tar.clone());
    let ls = own_dataset_mean_on(&mut tape, s, src_onehots)?;
    let lt = own_dataset_mean_on(&mut tape, t, tar_onehots)?;
    let l = tape.add(lt, ls)?;
    Ok(tape.value(l).item()?.as_f64())
}
