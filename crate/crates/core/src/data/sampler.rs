use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetIndex;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { p: 18, k: 4 }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::config("sampler.p", "at least 2 identities per batch are required"));
        }
        if self.k < 2 {
            return Err(Error::config("sampler.k", "at least 2 samples per identity are required"));
        }
        Ok(())
    }

    /// Batches in one epoch: `⌈train_size / (P·K)⌉`.
    pub fn batches_per_epoch(&self, train_size: usize) -> usize {
        train_size.div_ceil(self.batch_size()).max(1)
    }
}

/// A P×K batch of training records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    /// Record indices into the dataset.
    pub records: Vec<usize>,
    /// Contiguous training labels.
    pub labels: Vec<usize>,
    pub identities: Vec<u64>,
    pub cameras: Vec<u64>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Draws `P` distinct identities and `K` samples of each.
///
/// Identities with fewer than `K` images are sampled with replacement.
pub fn pk_sample<R: Rng + ?Sized>(index: &DatasetIndex, cfg: &SamplerConfig, rng: &mut R) -> Result<TripletBatch> {
    cfg.validate()?;
    let n = index.num_classes();
    if n < cfg.p {
        return Err(Error::Data(format!(
            "{n} training identities but P = {} per batch",
            cfg.p
        )));
    }
    let mut batch = TripletBatch {
        records: Vec::with_capacity(cfg.batch_size()),
        labels: Vec::with_capacity(cfg.batch_size()),
        identities: Vec::with_capacity(cfg.batch_size()),
        cameras: Vec::with_capacity(cfg.batch_size()),
    };
    for label in sample(rng, n, cfg.p) {
        let pool = index.samples_of_label(label);
        let picks: Vec<usize> = if pool.len() >= cfg.k {
            sample(rng, pool.len(), cfg.k).into_iter().map(|i| pool[i]).collect()
        } else {
            (0..cfg.k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        for r in picks {
            let rec = &index.records()[r];
            batch.records.push(r);
            batch.labels.push(label);
            batch.identities.push(rec.identity);
            batch.cameras.push(rec.camera);
        }
    }
    Ok(batch)
}
