use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DomainDataset, Example};
use crate::error::{Error, Result};

/// One optimization step worth of data, drawn from the three training pools.
#[derive(Clone, Debug, Default)]
pub struct TriStreamBatch<'a> {
    pub source: Vec<&'a Example>,
    pub target_labeled: Vec<&'a Example>,
    pub target_unlabeled: Vec<&'a Example>,
}

impl<'a> TriStreamBatch<'a> {
    pub fn target(&self) -> impl Iterator<Item = &'a Example> + '_ {
        self.target_labeled
            .iter()
            .chain(self.target_unlabeled.iter())
            .copied()
    }

    pub fn n_target(&self) -> usize {
        self.target_labeled.len() + self.target_unlabeled.len()
    }

    pub fn n_labeled(&self) -> usize {
        self.source.len() + self.target_labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty() && self.n_target() == 0
    }
}

/// Endless shuffled pass over `0..n`, reshuffling at each wrap.
#[derive(Clone, Debug)]
struct CyclicSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl CyclicSampler {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        CyclicSampler {
            order,
            cursor: 0,
            rng,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchSlot {
    Source,
    TargetLabeled,
    TargetUnlabeled,
}

#[derive(Clone, Debug)]
struct Stream<'a> {
    pool: &'a [Example],
    per_batch: usize,
    sampler: CyclicSampler,
}

impl<'a> Stream<'a> {
    fn draw(&mut self) -> Vec<&'a Example> {
        let pool = self.pool;
        self.sampler
            .take(self.per_batch)
            .into_iter()
            .map(|i| &pool[i])
            .collect()
    }
}

/// Infinite, seeded sequence of [`TriStreamBatch`]es.
///
/// Each pool cycles independently with a fresh shuffle per pass; an epoch is
/// [`BatchStream::steps_per_epoch`] batches, enough to exhaust the largest domain.
#[derive(Clone, Debug)]
pub struct BatchStream<'a> {
    source: Option<Stream<'a>>,
    labeled: Option<Stream<'a>>,
    unlabeled: Option<Stream<'a>>,
    steps_per_epoch: usize,
}

impl<'a> BatchStream<'a> {
    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn labeled_per_batch(&self) -> usize {
        self.labeled.as_ref().map_or(0, |s| s.per_batch)
    }

    /// Drops the next `n` batches, e.g. to resume from a checkpoint.
    pub fn skip_steps(&mut self, n: usize) {
        for _ in 0..n {
            self.next();
        }
    }
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = TriStreamBatch<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        let draw = |s: &mut Option<Stream<'a>>| s.as_mut().map(Stream::draw).unwrap_or_default();
        Some(TriStreamBatch {
            source: draw(&mut self.source),
            target_labeled: draw(&mut self.labeled),
            target_unlabeled: draw(&mut self.unlabeled),
        })
    }
}

/// Labeled-target examples per batch: the pool's share of `batch_size`, keeping at least one
/// slot for each non-empty target pool.
fn labeled_share(batch_size: usize, n_labeled: usize, n_unlabeled: usize) -> usize {
    if n_labeled == 0 {
        return 0;
    }
    if n_unlabeled == 0 {
        return batch_size;
    }
    let total = n_labeled + n_unlabeled;
    let k = ((batch_size * n_labeled) as f64 / total as f64).round() as usize;
    let k = k.max(1);
    if batch_size > 1 {
        k.min(batch_size - 1)
    } else {
        k
    }
}

/// Tri-stream batches for adaptation: `batch_size` source examples and `batch_size` target
/// examples per step, the target slots split between labeled and unlabeled pools in proportion
/// to their sizes.
pub fn make_batches(ds: &DomainDataset, batch_size: usize, seed: u64) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if ds.source_train.is_empty() {
        return Err(Error::Input("source pool is empty".into()));
    }
    if ds.n_target() == 0 {
        return Err(Error::Input("target training pool is empty".into()));
    }
    let k = labeled_share(batch_size, ds.n_target_labeled(), ds.n_target_unlabeled());
    fn stream(pool: &[Example], per_batch: usize, seed: u64, id: u64) -> Option<Stream<'_>> {
        (per_batch > 0).then(|| Stream {
            pool,
            per_batch,
            sampler: CyclicSampler::new(pool.len(), seed, id),
        })
    }
    Ok(BatchStream {
        source: stream(&ds.source_train, batch_size, seed, 0),
        labeled: stream(&ds.target_train_labeled, k, seed, 1),
        unlabeled: stream(&ds.target_train_unlabeled, batch_size - k, seed, 2),
        steps_per_epoch: ds.n_source().max(ds.n_target()).div_ceil(batch_size),
    })
}

/// Single-pool batches placed in one slot; used by the supervised baselines.
pub fn make_pool_batches<'a>(
    pool: &'a [Example],
    slot: BatchSlot,
    batch_size: usize,
    seed: u64,
) -> Result<BatchStream<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Input("training pool is empty".into()));
    }
    let s = Some(Stream {
        pool,
        per_batch: batch_size,
        sampler: CyclicSampler::new(pool.len(), seed, slot as u64),
    });
    let mut stream = BatchStream {
        source: None,
        labeled: None,
        unlabeled: None,
        steps_per_epoch: pool.len().div_ceil(batch_size),
    };
    match slot {
        BatchSlot::Source => stream.source = s,
        BatchSlot::TargetLabeled => stream.labeled = s,
        BatchSlot::TargetUnlabeled => stream.unlabeled = s,
    }
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Domain, Label};

    fn pool(prefix: &str, n: usize, domain: Domain, label: Option<Label>) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                id: format!("{prefix}{i}"),
                features: vec![i as f64],
                label,
                domain,
            })
            .collect()
    }

    fn dataset(ns: usize, nl: usize, nu: usize) -> DomainDataset {
        DomainDataset {
            dim: 1,
            shape: None,
            source_train: pool("s", ns, Domain::Source, Some(Label::Normal)),
            target_train_labeled: pool("l", nl, Domain::Target, Some(Label::Disease)),
            target_train_unlabeled: pool("u", nu, Domain::Target, None),
            target_test: vec![],
        }
    }

    #[test]
    fn two_batches_per_epoch() {
        let ds = dataset(32, 8, 24);
        let stream = make_batches(&ds, 16, 7).unwrap();
        assert_eq!(stream.steps_per_epoch(), 2);
        for b in stream.take(2) {
            assert_eq!(b.source.len(), 16);
            assert_eq!(b.n_target(), 16);
            assert_eq!(b.target_labeled.len(), 4);
        }
    }

    #[test]
    fn batch_equal_to_pool_is_a_permutation() {
        let ds = dataset(16, 4, 12);
        let mut stream = make_batches(&ds, 16, 3).unwrap();
        assert_eq!(stream.steps_per_epoch(), 1);
        let b = stream.next().unwrap();
        let mut ids: Vec<&str> = b.source.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        let mut expected: Vec<&str> = ds.source_train.iter().map(|e| e.id.as_str()).collect();
        expected.sort_unstable();
        assert_eq!(ids, expected);
        let mut tids: Vec<&str> = b.target().map(|e| e.id.as_str()).collect();
        tids.sort_unstable();
        let mut texp: Vec<&str> = ds.target_train().map(|e| e.id.as_str()).collect();
        texp.sort_unstable();
        assert_eq!(tids, texp);
    }

    #[test]
    fn same_seed_same_sequence() {
        let ds = dataset(40, 5, 30);
        let ids = |seed| {
            make_batches(&ds, 8, seed)
                .unwrap()
                .take(12)
                .map(|b| {
                    b.source
                        .iter()
                        .chain(b.target_labeled.iter())
                        .chain(b.target_unlabeled.iter())
                        .map(|e| e.id.clone())
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(1), ids(1));
        assert_ne!(ids(1), ids(2));
    }

    #[test]
    fn every_example_seen_each_pass() {
        let ds = dataset(10, 2, 6);
        let mut stream = make_batches(&ds, 5, 0).unwrap();
        let first_pass: Vec<String> = (0..2)
            .flat_map(|_| stream.next().unwrap().source)
            .map(|e| e.id.clone())
            .collect();
        let mut sorted = first_pass.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
    }

    #[test]
    fn empty_pools_rejected() {
        assert!(make_batches(&dataset(0, 1, 1), 4, 0).is_err());
        assert!(make_batches(&dataset(4, 0, 0), 4, 0).is_err());
        assert!(make_batches(&dataset(4, 1, 1), 0, 0).is_err());
        assert!(make_pool_batches(&[], BatchSlot::Source, 4, 0).is_err());
    }

    #[test]
    fn labeled_share_bounds() {
        assert_eq!(labeled_share(16, 84, 196), 5);
        assert_eq!(labeled_share(16, 8, 24), 4);
        assert_eq!(labeled_share(16, 1, 1000), 1);
        assert_eq!(labeled_share(16, 1000, 1), 15);
        assert_eq!(labeled_share(16, 3, 0), 16);
        assert_eq!(labeled_share(16, 0, 3), 0);
    }
}
