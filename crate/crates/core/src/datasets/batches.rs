use super::{Dataset, Source};
use crate::error::{bail, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch<T> {
    /// `[batch, sample_shape..]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub sources: Vec<Source>,
    pub true_classes: Vec<usize>,
    /// Dataset indices the batch was drawn from.
    pub indices: Vec<usize>,
}

impl<T> SampleBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// Share of each batch drawn from sequence data. `None` mixes proportionally.
    pub sequence_fraction: Option<f64>,
    pub shuffle_seed: u64,
}

impl BatchPlan {
    pub fn new(batch_size: usize, shuffle_seed: u64) -> Self {
        BatchPlan {
            batch_size,
            sequence_fraction: None,
            shuffle_seed,
        }
    }
}

/// Resumable position of a [`BatchIter`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct BatchCursor {
    pub epoch: u64,
    /// Proportional mode uses slot 0; fractional mode uses identity, sequence.
    pub cursors: [u64; 2],
    pub batch_in_epoch: u64,
    pub rng_state: u64,
}

#[derive(Clone, Debug)]
enum Mixing {
    Proportional {
        order: Vec<usize>,
    },
    Fixed {
        pools: [Vec<usize>; 2],
        orders: [Vec<usize>; 2],
        per_batch: [usize; 2],
        epoch_batches: usize,
    },
}

/// Infinite, deterministic stream of batches.
///
/// Proportional mode walks a fresh permutation of the whole dataset per epoch
/// (seeded by `shuffle_seed + epoch`); a batch may straddle two epochs. Fixed
/// mode takes `round(batch_size * fraction)` sequence samples and the rest
/// identity samples. An epoch lasts until the side needing the most batches
/// has been seen once; the other side is drawn with replacement after it runs out.
#[derive(Clone, Debug)]
pub struct BatchIter<'a, T> {
    data: &'a Dataset<T>,
    plan: BatchPlan,
    rng: Rng,
    mixing: Mixing,
    epoch: u64,
    cursors: [usize; 2],
    batch_in_epoch: usize,
}

pub fn iterate_batches<'a, T: Scalar>(
    data: &'a Dataset<T>,
    plan: &BatchPlan,
    rng: Rng,
) -> Result<BatchIter<'a, T>> {
    if data.is_empty() {
        bail!(Configuration, "cannot batch an empty dataset");
    }
    if plan.batch_size == 0 {
        bail!(Parameter, "batch size must be at least 1");
    }
    let mixing = match plan.sequence_fraction {
        None => Mixing::Proportional { order: Vec::new() },
        Some(f) => {
            if !(0.0..=1.0).contains(&f) {
                bail!(Configuration, "sequence fraction {f} outside [0, 1]");
            }
            let pools = [data.indices_of(Source::Identity), data.indices_of(Source::Sequence)];
            if pools.iter().any(Vec::is_empty) {
                bail!(
                    Configuration,
                    "sequence fraction set but the dataset has {} identity and {} sequence samples",
                    pools[0].len(),
                    pools[1].len()
                );
            }
            let seq = (plan.batch_size as f64 * f).round() as usize;
            let per_batch = [plan.batch_size - seq, seq];
            let epoch_batches = (0..2)
                .filter(|&s| per_batch[s] > 0)
                .map(|s| pools[s].len().div_ceil(per_batch[s]))
                .max()
                .unwrap_or(1);
            Mixing::Fixed {
                pools,
                orders: [Vec::new(), Vec::new()],
                per_batch,
                epoch_batches,
            }
        }
    };
    let mut it = BatchIter {
        data,
        plan: plan.clone(),
        rng,
        mixing,
        epoch: 0,
        cursors: [0, 0],
        batch_in_epoch: 0,
    };
    it.reshuffle();
    Ok(it)
}

impl<'a, T: Scalar> BatchIter<'a, T> {
    fn reshuffle(&mut self) {
        let mut shuffler = Rng::new(self.plan.shuffle_seed.wrapping_add(self.epoch));
        match &mut self.mixing {
            Mixing::Proportional { order } => *order = shuffler.permutation(self.data.len()),
            Mixing::Fixed { pools, orders, .. } => {
                for side in 0..2 {
                    let mut o = pools[side].clone();
                    shuffler.shuffle(&mut o);
                    orders[side] = o;
                }
            }
        }
    }

    pub fn position(&self) -> BatchCursor {
        BatchCursor {
            epoch: self.epoch,
            cursors: [self.cursors[0] as u64, self.cursors[1] as u64],
            batch_in_epoch: self.batch_in_epoch as u64,
            rng_state: self.rng.state(),
        }
    }

    pub fn seek(&mut self, cursor: BatchCursor) {
        self.epoch = cursor.epoch;
        self.cursors = [cursor.cursors[0] as usize, cursor.cursors[1] as usize];
        self.batch_in_epoch = cursor.batch_in_epoch as usize;
        self.rng = Rng::new(cursor.rng_state);
        self.reshuffle();
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let b = self.plan.batch_size;
        let mut picked = Vec::with_capacity(b);
        match &self.mixing {
            Mixing::Proportional { .. } => {
                while picked.len() < b {
                    let Mixing::Proportional { order } = &self.mixing else { unreachable!() };
                    if self.cursors[0] == order.len() {
                        self.epoch += 1;
                        self.cursors[0] = 0;
                        self.reshuffle();
                        continue;
                    }
                    picked.push(order[self.cursors[0]]);
                    self.cursors[0] += 1;
                }
            }
            Mixing::Fixed {
                pools,
                orders,
                per_batch,
                epoch_batches,
            } => {
                for side in 0..2 {
                    for _ in 0..per_batch[side] {
                        if self.cursors[side] < orders[side].len() {
                            picked.push(orders[side][self.cursors[side]]);
                            self.cursors[side] += 1;
                        } else {
                            let pool = &pools[side];
                            picked.push(pool[self.rng.below(pool.len())]);
                        }
                    }
                }
                self.batch_in_epoch += 1;
                if self.batch_in_epoch == *epoch_batches {
                    self.epoch += 1;
                    self.batch_in_epoch = 0;
                    self.cursors = [0, 0];
                    self.reshuffle();
                }
            }
        }
        picked
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl<'a, T: Scalar> Iterator for BatchIter<'a, T> {
    type Item = SampleBatch<T>;

    fn next(&mut self) -> Option<SampleBatch<T>> {
        let idx = self.next_indices();
        Some(self.data.gather(&idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_synthetic_clusters, split_identity_sequence};

    fn mixed() -> Dataset<f64> {
        let base = make_synthetic_clusters(&mut Rng::new(0), 6, 30, 2, 1.0, 3.0).unwrap();
        split_identity_sequence(&base, &mut Rng::new(1), 2, 3, 8).unwrap()
    }

    #[test]
    fn fixed_fraction_composition() {
        let data = mixed();
        let plan = BatchPlan {
            batch_size: 32,
            sequence_fraction: Some(0.5),
            shuffle_seed: 4,
        };
        let it = iterate_batches(&data, &plan, Rng::new(0)).unwrap();
        for batch in it.take(50) {
            let seq = batch.sources.iter().filter(|&&s| s == Source::Sequence).count();
            assert_eq!(seq, 16);
            assert_eq!(batch.len(), 32);
        }
    }

    #[test]
    fn identity_only_proportional() {
        let data = make_synthetic_clusters::<f64>(&mut Rng::new(0), 3, 10, 2, 1.0, 3.0).unwrap();
        let it = iterate_batches(&data, &BatchPlan::new(7, 0), Rng::new(0)).unwrap();
        for batch in it.take(20) {
            assert!(batch.sources.iter().all(|&s| s == Source::Identity));
        }
    }

    #[test]
    fn one_epoch_is_a_permutation() {
        let data = mixed();
        let mut it = iterate_batches(&data, &BatchPlan::new(32, 9), Rng::new(0)).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        while seen.len() < data.len() {
            seen.extend(it.next_indices());
        }
        seen.truncate(data.len());
        seen.sort_unstable();
        assert_eq!(seen, (0..data.len()).collect::<Vec<_>>());
    }

    #[test]
    fn epochs_reshuffle_differently() {
        let data = mixed();
        let n = data.len();
        let mut it = iterate_batches(&data, &BatchPlan::new(n, 9), Rng::new(0)).unwrap();
        let a = it.next_indices();
        let b = it.next_indices();
        assert_ne!(a, b);
    }

    #[test]
    fn seek_resumes_stream() {
        let data = mixed();
        let plan = BatchPlan {
            batch_size: 10,
            sequence_fraction: Some(0.3),
            shuffle_seed: 2,
        };
        let mut a = iterate_batches(&data, &plan, Rng::new(5)).unwrap();
        for _ in 0..37 {
            a.next_indices();
        }
        let pos = a.position();
        let mut b = iterate_batches(&data, &plan, Rng::new(123)).unwrap();
        b.seek(pos);
        for _ in 0..40 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
    }

    #[test]
    fn fraction_requires_both_sides() {
        let data = make_synthetic_clusters::<f64>(&mut Rng::new(0), 3, 10, 2, 1.0, 3.0).unwrap();
        let plan = BatchPlan {
            batch_size: 4,
            sequence_fraction: Some(0.5),
            shuffle_seed: 0,
        };
        assert!(matches!(
            iterate_batches(&data, &plan, Rng::new(0)),
            Err(crate::Error::Configuration(_))
        ));
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = Dataset::<f64>::empty(&[2], crate::LabelSpace::new(1, 0).unwrap());
        assert!(iterate_batches(&data, &BatchPlan::new(4, 0), Rng::new(0)).is_err());
    }
}
