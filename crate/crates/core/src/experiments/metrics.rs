//! Unweighted average recall and per-subject aggregation.

use crate::error::{Error, Result};
use crate::models::N_CLASSES;

fn recalls(pred: &[usize], truth: &[usize]) -> Result<([usize; N_CLASSES], [usize; N_CLASSES])> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "uar needs equal nonempty inputs, got {} predictions and {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mut hits = [0usize; N_CLASSES];
    let mut totals = [0usize; N_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        if t >= N_CLASSES || p >= N_CLASSES {
            return Err(Error::InvalidArgument(format!("class id out of range: pred {p}, truth {t}")));
        }
        totals[t] += 1;
        hits[t] += (p == t) as usize;
    }
    Ok((hits, totals))
}

/// Mean per-class recall; every class must occur in `truth`.
pub fn uar(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let (hits, totals) = recalls(pred, truth)?;
    if let Some(k) = totals.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("class {k} absent from truths; recall undefined")));
    }
    Ok((0..N_CLASSES).map(|k| hits[k] as f64 / totals[k] as f64).sum::<f64>() / N_CLASSES as f64)
}

/// Mean recall over the classes that do occur in `truth`.
pub fn uar_over_present(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let (hits, totals) = recalls(pred, truth)?;
    let present: Vec<usize> = (0..N_CLASSES).filter(|&k| totals[k] > 0).collect();
    Ok(present.iter().map(|&k| hits[k] as f64 / totals[k] as f64).sum::<f64>() / present.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let truth = [0, 0, 1, 1, 2, 2, 2];
        assert_eq!(uar(&truth, &truth).unwrap(), 1.0);
        assert!((uar(&[1; 7], &truth).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        // recalls 1.0, 0.5, 0.0
        let got = uar(&[0, 0, 1, 0, 0, 1, 1], &truth).unwrap();
        assert!((got - 0.5).abs() < 1e-15);
        assert!(uar(&[0, 1], &[0, 1]).is_err());
        assert_eq!(uar_over_present(&[0, 0], &[0, 1]).unwrap(), 0.5);
        assert!(uar(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn relabeling_invariant(pairs in prop::collection::vec((0usize..3, 0usize..3), 3..60), perm in Just([2usize, 0, 1])) {
            let mut truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            truth[..3].copy_from_slice(&[0, 1, 2]);
            let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let a = uar(&pred, &truth).unwrap();
            let pp: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
            let tp: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
            prop_assert!((a - uar(&pp, &tp).unwrap()).abs() < 1e-12);
        }
    }
}
