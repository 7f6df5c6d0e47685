use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::records::PreferencePair;
use super::tokenizer::PAD;
use super::DataError;

/// Right-padded token matrix for one forward pass.
///
/// Row `r` holds a real sequence in positions `0..lengths[r]` and `PAD`
/// afterwards. Only positions `prompt_lens[r]..lengths[r]` are scored.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub rows: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub prompt_lens: Vec<usize>,
}

impl SequenceBatch {
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[(S, usize)]) -> Result<Self, DataError> {
        let seq_len = seqs.iter().map(|(s, _)| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut lengths = Vec::with_capacity(seqs.len());
        let mut prompt_lens = Vec::with_capacity(seqs.len());
        for (s, prompt_len) in seqs {
            let s = s.as_ref();
            if *prompt_len == 0 || *prompt_len > s.len() {
                return Err(DataError::PromptLength {
                    prompt_len: *prompt_len,
                    len: s.len(),
                });
            }
            ids.extend(s.iter().map(|t| *t as usize));
            ids.extend(std::iter::repeat(PAD as usize).take(seq_len - s.len()));
            lengths.push(s.len());
            prompt_lens.push(*prompt_len);
        }
        Ok(Self {
            rows: seqs.len(),
            seq_len,
            ids,
            lengths,
            prompt_lens,
        })
    }

    pub fn single(tokens: &[u32], prompt_len: usize) -> Result<Self, DataError> {
        Self::from_sequences(&[(tokens, prompt_len)])
    }

    /// `true` at real (non-padding) positions, row-major.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.rows)
            .flat_map(|r| (0..self.seq_len).map(move |p| p < self.lengths[r]))
            .collect()
    }

    pub fn response_len(&self, row: usize) -> usize {
        self.lengths[row] - self.prompt_lens[row]
    }

    /// Number of scored tokens over all rows.
    pub fn total_response_tokens(&self) -> usize {
        (0..self.rows).map(|r| self.response_len(r)).sum()
    }
}

/// A mini-batch of preference pairs.
///
/// `sequences` holds the chosen responses of every pair first, then the
/// rejected ones, in the order of `indices`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub epoch: usize,
    pub indices: Vec<usize>,
    pub sequences: SequenceBatch,
}

impl PairBatch {
    pub fn new(pairs: &[PreferencePair], indices: Vec<usize>, epoch: usize) -> Result<Self, DataError> {
        let mut seqs: Vec<(Vec<u32>, usize)> = Vec::with_capacity(indices.len() * 2);
        for &i in &indices {
            seqs.push((pairs[i].chosen_sequence(), pairs[i].prompt_len()));
        }
        for &i in &indices {
            seqs.push((pairs[i].rejected_sequence(), pairs[i].prompt_len()));
        }
        Ok(Self {
            epoch,
            indices,
            sequences: SequenceBatch::from_sequences(&seqs)?,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Shuffled batch layout of one epoch over `n` items.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize, drop_last: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    idx.chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect()
}

pub fn batches_per_epoch(n: usize, batch_size: usize, drop_last: bool) -> usize {
    if drop_last {
        n / batch_size
    } else {
        n.div_ceil(batch_size)
    }
}

/// Endless stream of shuffled mini-batches, reshuffled every epoch.
pub struct BatchIter<'a> {
    pairs: &'a [PreferencePair],
    batch_size: usize,
    seed: u64,
    drop_last: bool,
    epoch: usize,
    order: Vec<Vec<usize>>,
    cursor: usize,
}

pub fn batch_iter(pairs: &[PreferencePair], batch_size: usize, seed: u64, drop_last: bool) -> BatchIter<'_> {
    BatchIter::new(pairs, batch_size, seed, drop_last)
}

impl<'a> BatchIter<'a> {
    pub fn new(pairs: &'a [PreferencePair], batch_size: usize, seed: u64, drop_last: bool) -> Self {
        let order = batch_order(pairs.len(), batch_size, seed, 0, drop_last);
        Self {
            pairs,
            batch_size,
            seed,
            drop_last,
            epoch: 0,
            order,
            cursor: 0,
        }
    }

    /// Positions the stream so the next batch is the one for global `step`.
    pub fn seek(&mut self, step: usize) {
        let per_epoch = batches_per_epoch(self.pairs.len(), self.batch_size, self.drop_last).max(1);
        self.epoch = step / per_epoch;
        self.cursor = step % per_epoch;
        self.order = batch_order(self.pairs.len(), self.batch_size, self.seed, self.epoch, self.drop_last);
    }

    pub fn batches_per_epoch(&self) -> usize {
        batches_per_epoch(self.pairs.len(), self.batch_size, self.drop_last)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<PairBatch, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.order.is_empty() {
            return None;
        }
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order = batch_order(self.pairs.len(), self.batch_size, self.seed, self.epoch, self.drop_last);
        }
        let indices = self.order[self.cursor].clone();
        self.cursor += 1;
        Some(PairBatch::new(self.pairs, indices, self.epoch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(n: usize) -> Vec<PreferencePair> {
        (0..n)
            .map(|i| {
                let len = 1 + i % 4;
                PreferencePair::new(format!("p{i}"), vec![257, 10], vec![65; len], vec![66; len + 1])
            })
            .collect()
    }

    #[test]
    fn batch_size_one_covers_each_pair_once_per_epoch() {
        let p = pairs(13);
        let seen: Vec<usize> = batch_iter(&p, 1, 5, false)
            .take(13)
            .flat_map(|b| b.unwrap().indices)
            .collect();
        let mut sorted = seen.clone();
        sorted.sort();
        assert_eq!(sorted, (0..13).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_order_and_epochs_reshuffle() {
        let p = pairs(10);
        let a: Vec<_> = batch_iter(&p, 3, 1, false).take(8).map(|b| b.unwrap().indices).collect();
        let b: Vec<_> = batch_iter(&p, 3, 1, false).take(8).map(|b| b.unwrap().indices).collect();
        assert_eq!(a, b);
        assert_ne!(batch_order(10, 3, 1, 0, false), batch_order(10, 3, 1, 1, false));
    }

    #[test]
    fn drop_last_discards_ragged_batch() {
        assert_eq!(batch_order(10, 3, 0, 0, true).len(), 3);
        assert_eq!(batch_order(10, 3, 0, 0, false).len(), 4);
    }

    #[test]
    fn seek_matches_sequential_iteration() {
        let p = pairs(7);
        let seq: Vec<_> = batch_iter(&p, 2, 9, false).take(11).map(|b| b.unwrap()).collect();
        let mut it = batch_iter(&p, 2, 9, false);
        it.seek(9);
        assert_eq!(it.next().unwrap().unwrap(), seq[9]);
        assert_eq!(it.next().unwrap().unwrap(), seq[10]);
    }

    #[test]
    fn padding_and_mask() {
        let p = pairs(3);
        let b = PairBatch::new(&p, vec![0, 2], 0).unwrap();
        let s = &b.sequences;
        assert_eq!(s.rows, 4);
        assert_eq!(s.seq_len, 2 + 4);
        assert_eq!(s.lengths, vec![3, 5, 4, 6]);
        let mask = s.mask();
        assert_eq!(mask.iter().filter(|m| **m).count(), 3 + 5 + 4 + 6);
        assert_eq!(s.ids[3], PAD as usize);
    }

    #[test]
    fn prompt_must_be_non_empty() {
        assert!(SequenceBatch::single(&[1, 2], 0).is_err());
        assert!(SequenceBatch::single(&[1, 2], 3).is_err());
        assert!(SequenceBatch::single(&[1, 2], 2).is_ok());
    }
}
