use rand::seq::SliceRandom;

use super::CorpusFile;
use crate::numerics::SeedStream;

/// Sample positions of one mini-batch, with their ids for bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seeded per-epoch shuffling into fixed-size batches; the last short batch
/// is kept.
#[derive(Clone, Debug)]
pub struct Batches {
    n: usize,
    batch_size: usize,
    seeds: SeedStream,
}

impl Batches {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Batches { n, batch_size: batch_size.max(1), seeds: SeedStream::new(seed).child("batches") }
    }

    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut self.seeds.child_index(epoch as u64).rng("shuffle"));
        idx
    }

    pub fn epoch<'a>(&self, data: &'a CorpusFile, epoch: usize) -> impl Iterator<Item = Batch> + 'a {
        let order = self.order(epoch);
        let size = self.batch_size;
        (0..order.len().div_ceil(size)).map(move |b| {
            let indices = order[b * size..((b + 1) * size).min(order.len())].to_vec();
            let ids = indices.iter().map(|&i| data.samples[i].sample_id.clone()).collect();
            Batch { indices, ids }
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }
}
