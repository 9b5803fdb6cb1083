use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusError, Result, Split};
use crate::rng::{purpose, stream};

/// One positive pair: two captions of the same image, usually in different
/// languages. Indices point into `Corpus::sentences`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub image: usize,
    pub first: usize,
    pub second: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub epoch: usize,
    pub items: Vec<BatchItem>,
}

/// Endless stream of minibatches over one split. Each epoch visits the split's
/// images in a fresh seeded order; the incomplete tail batch is dropped.
#[derive(Clone, Debug)]
pub struct MinibatchSampler {
    /// `(image, [lang] -> sentence indices)` for images in the split.
    cells: Vec<(usize, Vec<Vec<usize>>)>,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl MinibatchSampler {
    pub fn new(corpus: &Corpus, split: Split, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(CorpusError::Config("batch_size must be at least 2".into()));
        }
        let ids = corpus.splits.get(split);
        if ids.is_empty() {
            return Err(CorpusError::EmptySplit(split));
        }
        if ids.len() < batch_size {
            return Err(CorpusError::Config(format!(
                "batch_size {batch_size} exceeds the {} images in the split",
                ids.len()
            )));
        }
        let all = corpus.cells();
        let mut cells = Vec::with_capacity(ids.len());
        for &i in ids {
            if all[i].iter().all(Vec::is_empty) {
                return Err(CorpusError::Invariant(format!("image {i} has no sentences")));
            }
            cells.push((i, all[i].clone()));
        }
        let mut sampler = Self {
            cells,
            batch_size,
            rng: stream(seed, purpose::BATCHES),
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        };
        sampler.reshuffle();
        Ok(sampler)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.cells.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.cells.len() / self.batch_size
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn sample_item(&mut self, slot: usize) -> BatchItem {
        let (image, langs) = &self.cells[slot];
        let present: Vec<usize> = (0..langs.len()).filter(|&l| !langs[l].is_empty()).collect();
        let (li, lj) = if present.len() >= 2 {
            let n = present.len();
            let pair = self.rng.gen_range(0..n * (n - 1) / 2);
            let (a, b) = unordered_pair(pair, n);
            (present[a], present[b])
        } else {
            (present[0], present[0])
        };
        let first = *langs[li].choose(&mut self.rng).expect("nonempty cell");
        let second = if li == lj && langs[li].len() > 1 {
            let others: Vec<usize> = langs[li].iter().copied().filter(|&s| s != first).collect();
            *others.choose(&mut self.rng).expect("second sentence")
        } else {
            *langs[lj].choose(&mut self.rng).expect("nonempty cell")
        };
        BatchItem {
            image: *image,
            first,
            second,
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let slots: Vec<usize> = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        let items = slots.into_iter().map(|s| self.sample_item(s)).collect();
        Batch {
            epoch: self.epoch,
            items,
        }
    }
}

impl Iterator for MinibatchSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Maps `k ∈ [0, n(n−1)/2)` to the k-th pair `(a, b)`, `a < b`, in lexicographic order.
fn unordered_pair(mut k: usize, n: usize) -> (usize, usize) {
    for a in 0..n {
        let row = n - a - 1;
        if k < row {
            return (a, a + 1 + k);
        }
        k -= row;
    }
    unreachable!("pair index out of range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_enumeration_is_exhaustive() {
        let pairs: Vec<_> = (0..6).map(|k| unordered_pair(k, 4)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }
}
