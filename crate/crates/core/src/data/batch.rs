//! Batch sampling and zero-padded assembly.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::labels::SoftLabel;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::models::{N_CLASSES, N_MELS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A training-view utterance. Items built for unlabelled or test pools
/// carry no label at all.
#[derive(Clone, Debug)]
pub struct Item {
    pub features: Arc<FeatureMatrix>,
    pub dataset: usize,
    pub label: Option<SoftLabel>,
}

#[derive(Clone, Debug)]
pub struct Batch<S> {
    /// `B x 40 x T_max`, zero beyond each utterance's length.
    pub features: Tensor<S>,
    pub lengths: Vec<usize>,
    /// `B x 3` soft labels when every item is labelled.
    pub labels: Option<Tensor<S>>,
    pub datasets: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    pub fn assemble(items: &[&Item]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("cannot assemble an empty batch".into()));
        }
        let b = items.len();
        let t_max = items.iter().map(|it| it.features.frames()).max().unwrap_or(0);
        let mut data = vec![S::zero(); b * N_MELS * t_max];
        for (i, it) in items.iter().enumerate() {
            let fm = &it.features;
            if fm.dims() != N_MELS {
                return Err(Error::shape("batch", format!("feature matrix has {} bins, need {N_MELS}", fm.dims())));
            }
            let base = i * N_MELS * t_max;
            // frames are T x 40 row-major; the batch is channels x time
            for t in 0..fm.frames() {
                for (c, &v) in fm.frame(t).iter().enumerate() {
                    data[base + c * t_max + t] = S::of(v as f64);
                }
            }
        }
        let labels = if items.iter().all(|it| it.label.is_some()) {
            let l = items.iter().flat_map(|it| it.label.expect("checked").probs()).map(S::of).collect();
            Some(Tensor::new(vec![b, N_CLASSES], l)?)
        } else {
            None
        };
        Ok(Self {
            features: Tensor::new(vec![b, N_MELS, t_max], data)?,
            lengths: items.iter().map(|it| it.features.frames()).collect(),
            labels,
            datasets: items.iter().map(|it| it.dataset).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// `B x n_datasets` one-hot rows of each item's dataset.
    pub fn dataset_onehots(&self, n_datasets: usize) -> Result<Tensor<S>> {
        let mut v = vec![S::zero(); self.len() * n_datasets];
        for (i, &d) in self.datasets.iter().enumerate() {
            if d >= n_datasets {
                return Err(Error::Data(format!("dataset index {d} out of range {n_datasets}")));
            }
            v[i * n_datasets + d] = S::one();
        }
        Tensor::new(vec![self.len(), n_datasets], v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Consecutive slices of a permutation, reshuffled once exhausted.
    EpochShuffle,
    /// Independent draws with replacement.
    Uniform,
}

/// Index sampler over a pool of `n` items.
#[derive(Clone, Debug)]
pub struct EpochShuffle {
    mode: SampleMode,
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl EpochShuffle {
    pub fn new<R: Rng + ?Sized>(n: usize, mode: SampleMode, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        if mode == SampleMode::EpochShuffle {
            order.shuffle(rng);
        }
        Self { mode, n, order, pos: 0 }
    }

    /// Next `m` pool positions; a final short slice is returned as-is.
    pub fn next_indices<R: Rng + ?Sized>(&mut self, m: usize, rng: &mut R) -> Vec<usize> {
        match self.mode {
            SampleMode::Uniform => (0..m).map(|_| rng.random_range(0..self.n)).collect(),
            SampleMode::EpochShuffle => {
                if self.pos >= self.n {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                let end = (self.pos + m).min(self.n);
                let out = self.order[self.pos..end].to_vec();
                self.pos = end;
                out
            }
        }
    }
}

/// Draws a batch of up to `m` items from `pool` through `sampler`.
pub fn sample_batch<S: Scalar, R: Rng + ?Sized>(
    pool: &[Item],
    m: usize,
    sampler: &mut EpochShuffle,
    rng: &mut R,
) -> Result<Batch<S>> {
    if pool.is_empty() {
        return Err(Error::Data("cannot sample from an empty pool".into()));
    }
    let idx = sampler.next_indices(m, rng);
    let items: Vec<&Item> = idx.iter().map(|&i| &pool[i]).collect();
    Batch::assemble(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::RunRng;
    use rand::SeedableRng;

    fn item(frames: usize, fill: f32, dataset: usize) -> Item {
        Item {
            features: Arc::new(FeatureMatrix::new(frames, N_MELS, vec![fill; frames * N_MELS]).unwrap()),
            dataset,
            label: Some(SoftLabel::hard(dataset % 3)),
        }
    }

    #[test]
    fn epoch_shuffle_partitions_pool() {
        let mut rng = RunRng::seed_from_u64(0);
        let mut s = EpochShuffle::new(64, SampleMode::EpochShuffle, &mut rng);
        let mut a = s.next_indices(32, &mut rng);
        let b = s.next_indices(32, &mut rng);
        a.extend(b);
        a.sort();
        assert_eq!(a, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn last_short_slice_is_kept() {
        let mut rng = RunRng::seed_from_u64(0);
        let mut s = EpochShuffle::new(5, SampleMode::EpochShuffle, &mut rng);
        assert_eq!(s.next_indices(4, &mut rng).len(), 4);
        assert_eq!(s.next_indices(4, &mut rng).len(), 1);
        assert_eq!(s.next_indices(4, &mut rng).len(), 4);
    }

    #[test]
    fn uniform_from_single_item_pool() {
        let mut rng = RunRng::seed_from_u64(0);
        let pool = vec![item(25, 1.0, 0)];
        let mut s = EpochShuffle::new(1, SampleMode::Uniform, &mut rng);
        let b: Batch<f64> = sample_batch(&pool, 4, &mut s, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.lengths, vec![25; 4]);
    }

    #[test]
    fn padding_is_exactly_zero() {
        let long = item(30, 2.0, 0);
        let short = item(24, 3.0, 1);
        let b: Batch<f64> = Batch::assemble(&[&long, &short]).unwrap();
        assert_eq!(b.features.shape(), &[2, N_MELS, 30]);
        let row = &b.features.data()[N_MELS * 30..N_MELS * 30 + 30];
        assert!(row[..24].iter().all(|&v| v == 3.0));
        assert!(row[24..].iter().all(|&v| v == 0.0));
        let oh = b.dataset_onehots(2).unwrap();
        assert_eq!(oh.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(b.dataset_onehots(1).is_err());
        assert!(b.labels.is_some());
    }
}
