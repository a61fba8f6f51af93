//! Train / validation / test fold construction.

use std::collections::HashSet;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Labelled-target budgets swept by the increasing-labels experiments.
pub const FIG4_BUDGETS: [usize; 6] = [0, 200, 400, 800, 1600, 3200];

/// Which half of the target set is held out for testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Half {
    First,
    Second,
}

impl Half {
    pub fn number(self) -> u8 {
        match self {
            Half::First => 1,
            Half::Second => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Half::First),
            2 => Ok(Half::Second),
            _ => Err(Error::InvalidArgument(format!("half must be 1 or 2, got {n}"))),
        }
    }
}

/// Utterance ids (corpus indices) assigned to each role.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FoldPlan {
    pub train_src: Vec<usize>,
    pub train_tar_labeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Target utterances the adversarial methods may see without labels.
    pub unlabeled_tar_pool: Vec<usize>,
    pub half: Option<Half>,
}

impl FoldPlan {
    pub fn validate(&self) -> Result<()> {
        let test: HashSet<_> = self.test.iter().collect();
        if self.val.iter().any(|i| test.contains(i)) {
            return Err(Error::Data("validation and test folds overlap".into()));
        }
        if self.train_src.iter().chain(&self.train_tar_labeled).any(|i| test.contains(i)) {
            return Err(Error::Data("labelled training data overlaps the test fold".into()));
        }
        if self.val.is_empty() {
            return Err(Error::Data("empty validation fold".into()));
        }
        Ok(())
    }
}

/// 80:20 split sizes; the validation side gets at least one item.
fn split_80_20(n: usize) -> (usize, usize) {
    let val = ((n as f64) * 0.2).round().max(1.0) as usize;
    (n - val, val)
}

fn shuffled(ids: &[usize], seed: u64, component: &str, index: u64) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.shuffle(&mut rng_for(seed, component, index));
    v
}

/// Source 80:20 into train/validation; the whole target set is the test
/// fold and the unlabelled pool.
pub fn split_exp1(src: &[usize], tar: &[usize], seed: u64) -> Result<FoldPlan> {
    if src.len() < 5 {
        return Err(Error::Data(format!("source set has {} utterances, need at least 5", src.len())));
    }
    if tar.is_empty() {
        return Err(Error::Data("empty target set".into()));
    }
    let s = shuffled(src, seed, "src-split", 0);
    let (n_train, _) = split_80_20(s.len());
    Ok(FoldPlan {
        train_src: s[..n_train].to_vec(),
        train_tar_labeled: Vec::new(),
        val: s[n_train..].to_vec(),
        test: tar.to_vec(),
        unlabeled_tar_pool: tar.to_vec(),
        half: None,
    })
}

/// Half-swap fold scheme.
///
/// The target set is shuffled once per `seed` and cut in half. `half`
/// picks the test half; `n_labeled` utterances are drawn from the other
/// half and split 80:20 into train/validation, the rest of that half is
/// discarded. Without labelled target data the source set is split 80:20
/// for validation instead.
pub fn split_fig4(src: &[usize], tar: &[usize], n_labeled: usize, half: Half, seed: u64) -> Result<FoldPlan> {
    if src.is_empty() || tar.len() < 2 {
        return Err(Error::Data("split needs a source set and at least two target utterances".into()));
    }
    let t = shuffled(tar, seed, "tar-halves", 0);
    let (a, b) = t.split_at(t.len() / 2);
    let (test, labeled_half) = match half {
        Half::First => (a, b),
        Half::Second => (b, a),
    };
    if n_labeled > labeled_half.len() {
        return Err(Error::Data(format!(
            "requested {n_labeled} labelled target utterances but the half holds {}",
            labeled_half.len()
        )));
    }

    let mut plan = FoldPlan { test: test.to_vec(), half: Some(half), ..Default::default() };
    if n_labeled == 0 {
        let s = shuffled(src, seed, "src-split", 0);
        let (n_train, _) = split_80_20(s.len());
        plan.train_src = s[..n_train].to_vec();
        plan.val = s[n_train..].to_vec();
    } else {
        if n_labeled < 2 {
            return Err(Error::Data("need at least 2 labelled target utterances to split train/validation".into()));
        }
        let picked = shuffled(labeled_half, seed, "labeled", half.number() as u64);
        let (n_train, _) = split_80_20(n_labeled);
        plan.train_src = src.to_vec();
        plan.train_tar_labeled = picked[..n_train].to_vec();
        plan.val = picked[n_train..n_labeled].to_vec();
    }
    plan.unlabeled_tar_pool = plan.test.iter().chain(&plan.train_tar_labeled).copied().collect();
    Ok(plan)
}
