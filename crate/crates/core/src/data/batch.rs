use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Dataset, Preprocessor};
use crate::error::{Error, Result};
use crate::params::Mode;
use crate::tensor::Tensor;

/// Independent generator for `(seed, stream, slot)`. Each slot owns a
/// disjoint window of 2^32 words in the ChaCha keystream, so results never
/// depend on which thread consumes them.
pub fn derive_rng(seed: u64, stream: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((slot as u128) << 32);
    rng
}

fn shuffle_stream(epoch: usize) -> u64 {
    2 * epoch as u64
}

fn sample_stream(epoch: usize) -> u64 {
    2 * epoch as u64 + 1
}

/// Visiting order for one epoch: identity when `shuffle` is off, else a
/// permutation fixed by `(seed, epoch)`.
pub fn epoch_order(len: usize, shuffle: bool, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut derive_rng(seed, shuffle_stream(epoch), 0));
    }
    order
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N, 3, T, T]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset indices of the rows.
    pub indices: Vec<usize>,
}

/// Iterates one epoch in batches; the final partial batch is kept.
/// Samples are preprocessed in parallel, each with its own derived rng.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    pre: &'a Preprocessor,
    mode: Mode,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    seed: u64,
    epoch: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        dataset: &'a Dataset,
        pre: &'a Preprocessor,
        mode: Mode,
        batch_size: usize,
        shuffle: bool,
        seed: u64,
        epoch: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        Ok(Self {
            dataset,
            pre,
            mode,
            order: epoch_order(dataset.len(), shuffle, seed, epoch),
            batch_size,
            cursor: 0,
            seed,
            epoch,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn build(&self, indices: &[usize]) -> Result<Batch> {
        let tensors: Vec<Tensor<f32>> = indices
            .par_iter()
            .map(|&i| {
                let mut rng = derive_rng(self.seed, sample_stream(self.epoch), i as u64);
                self.pre.sample(&self.dataset.samples[i], self.mode, &mut rng)
            })
            .collect::<Result<_>>()?;
        let t = self.pre.size;
        let mut data = Vec::with_capacity(indices.len() * 3 * t * t);
        for x in tensors {
            data.extend_from_slice(x.data());
        }
        Ok(Batch {
            images: Tensor::new(&[indices.len(), 3, t, t], data)?,
            labels: indices.iter().map(|&i| self.dataset.samples[i].label).collect(),
            indices: indices.to_vec(),
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(self.build(&indices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, AugmentPolicy, Normalization};

    #[test]
    fn partial_batch_is_kept() {
        let ds = synth_dataset(2, 5, 32, 0).unwrap();
        let pre = Preprocessor::new(32, Normalization::synthetic(), AugmentPolicy::default()).unwrap();
        let sizes: Vec<usize> = BatchIter::new(&ds, &pre, Mode::Train, 4, true, 1, 0)
            .unwrap()
            .map(|b| b.unwrap().labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn shuffle_off_preserves_order_and_shuffle_replays() {
        assert_eq!(epoch_order(6, false, 3, 2), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(epoch_order(50, true, 3, 2), epoch_order(50, true, 3, 2));
        assert_ne!(epoch_order(50, true, 3, 2), epoch_order(50, true, 3, 3));
    }

    #[test]
    fn labels_follow_indices() {
        let ds = synth_dataset(3, 4, 32, 0).unwrap();
        let pre = Preprocessor::new(32, Normalization::synthetic(), AugmentPolicy::default()).unwrap();
        for b in BatchIter::new(&ds, &pre, Mode::Eval, 5, true, 9, 1).unwrap() {
            let b = b.unwrap();
            for (l, i) in b.labels.iter().zip(&b.indices) {
                assert_eq!(*l, ds.samples[*i].label);
            }
        }
    }
}
