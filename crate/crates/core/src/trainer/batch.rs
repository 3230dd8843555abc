use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `(labeled, unlabeled)` slot counts: `floor(ratio · batch)` unlabeled slots.
pub fn batch_split(batch_size: usize, unlabeled_ratio: f64) -> Result<(usize, usize)> {
    if !(unlabeled_ratio > 0.0 && unlabeled_ratio < 1.0) {
        return Err(Error::Config(format!(
            "unlabeled ratio must lie in (0, 1), got {unlabeled_ratio}"
        )));
    }
    let n_u = (unlabeled_ratio * batch_size as f64).floor() as usize;
    if n_u == 0 || n_u == batch_size {
        return Err(Error::Config(format!(
            "batch {batch_size} with ratio {unlabeled_ratio} leaves a slot type empty"
        )));
    }
    Ok((batch_size - n_u, n_u))
}

/// Draws pool indices without replacement, reshuffling after each full pass.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    passes: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(pool: usize, seed: u64) -> Result<Self> {
        if pool == 0 {
            return Err(Error::Config("cannot sample from an empty pool".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..pool).collect();
        order.shuffle(&mut rng);
        Ok(EpochSampler {
            order,
            pos: 0,
            passes: 0,
            rng,
        })
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.passes += 1;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    pub fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next_index()).collect()
    }

    /// Completed passes over the pool.
    pub fn passes(&self) -> usize {
        self.passes
    }
}

/// Indices of one mixed batch into the labeled and unlabeled pools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Stream of mixed batches over a labeled and an unlabeled pool.
#[derive(Clone, Debug)]
pub struct BatchComposer {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    labeled: EpochSampler,
    unlabeled: EpochSampler,
}

pub fn compose_batch(
    labeled_pool: usize,
    unlabeled_pool: usize,
    batch_size: usize,
    unlabeled_ratio: f64,
    seed: u64,
) -> Result<BatchComposer> {
    let (n_labeled, n_unlabeled) = batch_split(batch_size, unlabeled_ratio)?;
    if labeled_pool == 0 || unlabeled_pool == 0 {
        return Err(Error::Config(format!(
            "both pools must be non-empty (labeled {labeled_pool}, unlabeled {unlabeled_pool})"
        )));
    }
    Ok(BatchComposer {
        n_labeled,
        n_unlabeled,
        labeled: EpochSampler::new(labeled_pool, seed)?,
        unlabeled: EpochSampler::new(unlabeled_pool, seed ^ 0x9e37_79b9_7f4a_7c15)?,
    })
}

impl Iterator for BatchComposer {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        Some(MixedBatch {
            labeled: self.labeled.take(self.n_labeled),
            unlabeled: self.unlabeled.take(self.n_unlabeled),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_rule_for_slot_counts() {
        assert_eq!(batch_split(16, 0.5).unwrap(), (8, 8));
        assert_eq!(batch_split(16, 0.8).unwrap(), (4, 12));
        assert_eq!(batch_split(8, 0.8).unwrap(), (2, 6));
        assert!(batch_split(16, 1.0).is_err());
        assert!(batch_split(2, 0.3).is_err());
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(compose_batch(5, 0, 16, 0.8, 0).is_err());
        assert!(compose_batch(0, 5, 16, 0.8, 0).is_err());
    }

    #[test]
    fn each_pass_visits_every_index_once() {
        let mut s = EpochSampler::new(7, 3).unwrap();
        let first: Vec<usize> = s.take(7);
        let second: Vec<usize> = s.take(7);
        for pass in [&first, &second] {
            let mut sorted = pass.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..7).collect::<Vec<_>>());
        }
        assert_ne!(first, second);
        assert_eq!(s.passes(), 1);
    }

    #[test]
    fn composer_is_deterministic() {
        let a: Vec<MixedBatch> = compose_batch(10, 30, 16, 0.8, 1).unwrap().take(5).collect();
        let b: Vec<MixedBatch> = compose_batch(10, 30, 16, 0.8, 1).unwrap().take(5).collect();
        assert_eq!(a, b);
        assert!(a
            .iter()
            .all(|m| m.labeled.len() == 4 && m.unlabeled.len() == 12));
    }
}
