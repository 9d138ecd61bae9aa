//! Bounded per-class exemplar memory with centroid-aware insertion.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, LabeledSample};
use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Tensor};

/// How stream samples are chosen for storage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionMode {
    /// Closest samples to each centroid of the class.
    #[default]
    Centroid,
    /// Uniformly random samples, same budget.
    Random,
}

#[derive(Clone, Debug)]
pub struct ReplayMemory {
    capacity: usize,
    classes_seen: usize,
    store: BTreeMap<ClassId, Vec<LabeledSample>>,
    mode: InsertionMode,
    rng: ChaCha8Rng,
}

impl ReplayMemory {
    pub fn new(capacity: usize, mode: InsertionMode, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            classes_seen: 0,
            store: BTreeMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mode(&self) -> InsertionMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes_seen(&self) -> usize {
        self.classes_seen
    }

    /// `floor(M / classes seen)`; classes already stored count as seen.
    pub fn quota(&self) -> usize {
        let n = self.classes_seen.max(self.store.len()).max(1);
        self.capacity / n
    }

    pub fn class_len(&self, c: ClassId) -> usize {
        self.store.get(&c).map_or(0, Vec::len)
    }

    pub fn class_samples(&self, c: ClassId) -> &[LabeledSample] {
        self.store.get(&c).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabeledSample> {
        self.store.values().flatten()
    }

    /// Default number of samples taken per centroid: the free room of the
    /// class split across its centroids, at least one.
    pub fn default_per_centroid(&self, c: ClassId, centroids: usize) -> usize {
        let free = self.quota().saturating_sub(self.class_len(c));
        (free / centroids.max(1)).max(1)
    }

    /// Stores samples of the stream batch `batch` (all of class `c`, with
    /// features `features`, one row per sample).
    ///
    /// In [`InsertionMode::Centroid`], the `per_centroid` samples closest to
    /// each row of `centroids` are chosen (deduplicated); without centroids
    /// the whole batch is offered. In [`InsertionMode::Random`] the same
    /// number of samples is drawn uniformly. Chosen samples fill free room
    /// first; once the class is at quota each replaces a distinct, uniformly
    /// chosen stored sample of the same class.
    pub fn insert_with_centroids(
        &mut self,
        c: ClassId,
        batch: &[&LabeledSample],
        features: &Tensor,
        centroids: Option<&Tensor>,
        per_centroid: usize,
    ) -> Result<usize> {
        if batch.is_empty() {
            return Ok(0);
        }
        if let Some(s) = batch.iter().find(|s| s.label != c) {
            return Err(Error::Data(format!(
                "sample of class {} offered to memory as class {c}",
                s.label
            )));
        }
        if features.rows() != batch.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} samples",
                features.rows(),
                batch.len()
            )));
        }
        let chosen: Vec<usize> = match centroids {
            None => (0..batch.len()).collect(),
            Some(mu) => {
                let budget = (per_centroid * mu.rows()).min(batch.len());
                match self.mode {
                    InsertionMode::Centroid => closest_to_centroids(features, mu, per_centroid),
                    InsertionMode::Random => {
                        let mut idx = index::sample(&mut self.rng, batch.len(), budget).into_vec();
                        idx.sort_unstable();
                        idx
                    }
                }
            }
        };
        let selected: Vec<LabeledSample> = chosen.iter().map(|&i| batch[i].clone()).collect();
        Ok(self.store_samples(c, selected))
    }

    fn store_samples(&mut self, c: ClassId, mut samples: Vec<LabeledSample>) -> usize {
        let quota = if self.store.contains_key(&c) {
            self.quota()
        } else {
            // A class not yet counted shrinks every other class's quota first.
            let q = self.capacity / self.classes_seen.max(self.store.len() + 1);
            self.trim_to(q);
            q
        };
        if quota == 0 {
            return 0;
        }
        let entry = self.store.entry(c).or_default();
        let room = quota.saturating_sub(entry.len());
        let rest = if samples.len() > room {
            samples.split_off(room)
        } else {
            Vec::new()
        };
        let mut stored = samples.len();
        entry.extend(samples);
        if !rest.is_empty() {
            let j = rest.len().min(entry.len());
            let victims = index::sample(&mut self.rng, entry.len(), j);
            for (v, s) in victims.iter().zip(rest) {
                entry[v] = s;
            }
            stored += j;
        }
        stored
    }

    fn trim_to(&mut self, quota: usize) {
        for samples in self.store.values_mut() {
            if samples.len() > quota {
                let mut keep = index::sample(&mut self.rng, samples.len(), quota).into_vec();
                keep.sort_unstable();
                let kept = keep.iter().map(|&i| samples[i].clone()).collect();
                *samples = kept;
            }
        }
    }

    /// Records that `classes_seen` classes have now been seen and trims every
    /// class to the new quota by uniform random eviction.
    pub fn rebalance_quotas(&mut self, classes_seen: usize) {
        self.classes_seen = self.classes_seen.max(classes_seen);
        let q = self.quota();
        self.trim_to(q);
    }

    /// Up to `batch_size` stored samples drawn uniformly without replacement,
    /// skipping classes in `exclude`, grouped by class in ascending order.
    pub fn sample_replay_batch_from(
        &mut self,
        batch_size: usize,
        exclude: &BTreeSet<ClassId>,
    ) -> Vec<LabeledSample> {
        let pool: Vec<&LabeledSample> = self
            .store
            .iter()
            .filter(|(c, _)| !exclude.contains(c))
            .flat_map(|(_, v)| v.iter())
            .collect();
        let k = batch_size.min(pool.len());
        let mut idx = index::sample(&mut self.rng, pool.len(), k).into_vec();
        // Pool order is class-major, so sorted indices come out grouped.
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect()
    }

    pub fn sample_replay_batch(&mut self, batch_size: usize) -> Vec<LabeledSample> {
        self.sample_replay_batch_from(batch_size, &BTreeSet::new())
    }
}

/// Indices of the `n` rows of `features` closest to each centroid,
/// deduplicated, in selection order.
fn closest_to_centroids(features: &Tensor, centroids: &Tensor, n: usize) -> Vec<usize> {
    let mut chosen = Vec::new();
    let mut taken = vec![false; features.rows()];
    for k in 0..centroids.rows() {
        let mu = centroids.row(k);
        let mut order: Vec<(f64, usize)> = (0..features.rows())
            .map(|i| (sq_dist(features.row(i), mu), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in order.iter().take(n) {
            if !taken[i] {
                taken[i] = true;
                chosen.push(i);
            }
        }
    }
    chosen
}
