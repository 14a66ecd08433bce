//! Seeded shuffling, per-step caption sampling and PAD-padded token batches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::PAD;
use crate::error::{Error, Result};

/// Teacher-forcing pair: `inputs[b, t]` predicts `targets[b, t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    /// Pads framed sequences (`BOS .. EOS`) to the longest one.
    pub fn from_framed(seqs: &[&[usize]]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.len() < 2) {
            return Err(Error::Data("token batch needs framed sequences of length >= 2".into()));
        }
        let len = seqs.iter().map(|s| s.len() - 1).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(seqs.len() * len);
        let mut targets = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let n = s.len() - 1;
            inputs.extend_from_slice(&s[..n]);
            inputs.extend(std::iter::repeat_n(PAD, len - n));
            targets.extend_from_slice(&s[1..]);
            targets.extend(std::iter::repeat_n(PAD, len - n));
        }
        Ok(Self {
            inputs,
            targets,
            batch: seqs.len(),
            len,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Record indices in batch order.
    pub indices: Vec<usize>,
    /// Which reference caption was drawn for each record.
    pub caption_choice: Vec<usize>,
    pub tokens: TokenBatch,
}

/// Step-addressable batch stream: epoch `e` is a seeded permutation cut into
/// `ceil(n / batch_size)` batches, the last one possibly short.
#[derive(Clone, Debug)]
pub struct Batcher {
    captions: Vec<Vec<Vec<usize>>>,
    batch_size: usize,
    seed: u64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

impl Batcher {
    /// `captions[i]` holds the framed token sequences of record `i`.
    pub fn new(captions: Vec<Vec<Vec<usize>>>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if captions.is_empty() || captions.iter().any(Vec::is_empty) {
            return Err(Error::Data("every record needs at least one caption".into()));
        }
        Ok(Self {
            captions,
            batch_size,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len().div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, epoch, 1)));
        order
    }

    /// The batch consumed at training step `step`.
    pub fn step(&self, step: u64) -> Batch {
        let bpe = self.batches_per_epoch() as u64;
        let order = self.epoch_order(step / bpe);
        let k = (step % bpe) as usize;
        let indices = order[k * self.batch_size..((k + 1) * self.batch_size).min(self.len())].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, step, 2));
        let caption_choice: Vec<usize> = indices
            .iter()
            .map(|&i| rng.gen_range(0..self.captions[i].len()))
            .collect();
        let seqs: Vec<&[usize]> = indices
            .iter()
            .zip(&caption_choice)
            .map(|(&i, &c)| self.captions[i][c].as_slice())
            .collect();
        let tokens = TokenBatch::from_framed(&seqs).expect("captions validated at construction");
        Batch {
            indices,
            caption_choice,
            tokens,
        }
    }

    /// All batches of one epoch.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
        let bpe = self.batches_per_epoch() as u64;
        (epoch * bpe..(epoch + 1) * bpe).map(|s| self.step(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caps(n: usize) -> Vec<Vec<Vec<usize>>> {
        (0..n).map(|i| vec![vec![1; 2 + i % 4], vec![1, 5, 2]]).collect()
    }

    #[test]
    fn ten_records_batch_sixteen() {
        let b = Batcher::new(caps(10), 16, 3).unwrap();
        let all: Vec<Batch> = b.epoch(0).collect();
        assert_eq!(all.len(), 1);
        let mut idx = all[0].indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn padding_is_batch_max() {
        let b = Batcher::new(caps(7), 3, 1).unwrap();
        for s in 0..6 {
            let batch = b.step(s);
            let want = batch
                .indices
                .iter()
                .zip(&batch.caption_choice)
                .map(|(&i, &c)| caps(7)[i][c].len() - 1)
                .max()
                .unwrap();
            assert_eq!(batch.tokens.len, want);
            assert_eq!(batch.tokens.inputs.len(), batch.tokens.batch * want);
        }
    }

    #[test]
    fn fixed_seed_fixed_stream() {
        let a = Batcher::new(caps(9), 4, 11).unwrap();
        let b = Batcher::new(caps(9), 4, 11).unwrap();
        for s in 0..10 {
            assert_eq!(a.step(s), b.step(s));
        }
        assert!(Batcher::new(caps(3), 0, 1).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn every_epoch_covers_each_record_once(n in 1usize..40, bs in 1usize..12, seed in any::<u64>(), epoch in 0u64..5) {
                let b = Batcher::new(caps(n), bs, seed).unwrap();
                let mut seen: Vec<usize> = b.epoch(epoch).flat_map(|x| x.indices).collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            }

            #[test]
            fn streams_depend_only_on_seed(n in 1usize..40, bs in 1usize..12, seed in any::<u64>(), step in 0u64..100) {
                let a = Batcher::new(caps(n), bs, seed).unwrap();
                let b = Batcher::new(caps(n), bs, seed).unwrap();
                prop_assert_eq!(a.step(step), b.step(step));
            }
        }
    }
}
