use crate::error::{Error, Result};
use crate::models::N_CLASSES;

pub const LOW: usize = 0;
pub const MID: usize = 1;
pub const HIGH: usize = 2;

/// Distribution over (low, mid, high) valence bins with a unique majority.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftLabel([f64; N_CLASSES]);

impl SoftLabel {
    pub fn probs(&self) -> [f64; N_CLASSES] {
        self.0
    }

    /// The majority bin; unique by construction.
    pub fn class(&self) -> usize {
        let mut best = 0;
        for k in 1..N_CLASSES {
            if self.0[k] > self.0[best] {
                best = k;
            }
        }
        best
    }

    /// Validates a distribution: non-negative, sums to 1, unique maximum.
    pub fn from_probs(p: [f64; N_CLASSES]) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Label(format!("{p:?} is not a distribution")));
        }
        let max = p.iter().cloned().fold(f64::MIN, f64::max);
        if p.iter().filter(|&&v| v == max).count() > 1 {
            return Err(Error::Label(format!("{p:?} has no unique majority bin")));
        }
        Ok(Self(p))
    }

    /// A one-hot label for `class`.
    pub fn hard(class: usize) -> Self {
        let mut p = [0.0; N_CLASSES];
        p[class] = 1.0;
        Self(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Binned {
    Label(SoftLabel),
    /// No unique majority bin; `counts` are (low, mid, high).
    Rejected { counts: [usize; N_CLASSES] },
}

/// Bins ratings around `midpoint` and normalises the counts.
///
/// The scale is taken to be `1 ..= 2 * midpoint - 1` (1-5 for midpoint 3,
/// 1-9 for midpoint 5).
pub fn bin_ratings(ratings: &[f64], midpoint: f64) -> Result<Binned> {
    if ratings.is_empty() {
        return Err(Error::Label("no ratings".into()));
    }
    let (lo, hi) = (1.0, 2.0 * midpoint - 1.0);
    if midpoint <= lo || midpoint >= hi {
        return Err(Error::Label(format!("midpoint {midpoint} is not inside the rating scale")));
    }
    let mut counts = [0usize; N_CLASSES];
    for &r in ratings {
        if !r.is_finite() || r < lo || r > hi {
            return Err(Error::Label(format!("rating {r} outside scale {lo}..={hi}")));
        }
        let bin = if r < midpoint {
            LOW
        } else if r == midpoint {
            MID
        } else {
            HIGH
        };
        counts[bin] += 1;
    }
    let max = *counts.iter().max().expect("three bins");
    if counts.iter().filter(|&&c| c == max).count() > 1 {
        return Ok(Binned::Rejected { counts });
    }
    let total = ratings.len() as f64;
    Ok(Binned::Label(SoftLabel(counts.map(|c| c as f64 / total))))
}

/// Per-bin weights `N / (3 n_k)` that give every majority bin equal total weight.
pub fn class_weights<'a>(labels: impl IntoIterator<Item = &'a SoftLabel>) -> Result<[f64; N_CLASSES]> {
    let mut counts = [0usize; N_CLASSES];
    for l in labels {
        counts[l.class()] += 1;
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::Label("class weights need at least one label".into()));
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Label(format!("valence bin {k} has no examples, cannot equalise")));
    }
    Ok(counts.map(|c| n as f64 / (N_CLASSES as f64 * c as f64)))
}
