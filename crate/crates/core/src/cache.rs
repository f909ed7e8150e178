//! Server-side knowledge cache of distilled records.

use std::sync::RwLock;

use rand::seq::index;
use rand::Rng;

use crate::data::LabelProfile;
use crate::distill::{check_distinct_labels, DistilledRecord};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// How per-class draw sizes are realized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Exactly `round(rate · |S_c|)` records without replacement.
    #[default]
    ExactCount,
    /// Each record kept independently with probability `rate`.
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeCache {
    clients: usize,
    classes: usize,
    by_client: Vec<Vec<DistilledRecord>>,
    /// `(client, position)` per class, ordered by `(producer, round)`.
    by_class: Vec<Vec<(usize, usize)>>,
}

impl KnowledgeCache {
    pub fn new(clients: usize, classes: usize) -> Self {
        Self {
            clients,
            classes,
            by_client: vec![Vec::new(); clients],
            by_class: vec![Vec::new(); classes],
        }
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Total number of cached records.
    pub fn len(&self) -> usize {
        self.by_client.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replaces client `k`'s entry wholesale. Validation happens before any
    /// mutation, so a rejected update leaves the cache unchanged.
    pub fn update_client_entry(&mut self, k: usize, records: Vec<DistilledRecord>) -> Result<()> {
        self.check_client(k)?;
        if let Some(r) = records.iter().find(|r| r.producer != k) {
            return Err(Error::Input(format!(
                "record produced by client {} cannot be stored under client {k}",
                r.producer
            )));
        }
        if let Some(r) = records.iter().find(|r| r.label >= self.classes) {
            return Err(Error::Input(format!(
                "record label {} out of range for {} classes",
                r.label, self.classes
            )));
        }
        check_distinct_labels(&records)?;
        self.by_client[k] = records;
        self.reindex();
        Ok(())
    }

    fn reindex(&mut self) {
        for list in &mut self.by_class {
            list.clear();
        }
        for (k, entry) in self.by_client.iter().enumerate() {
            for (pos, r) in entry.iter().enumerate() {
                self.by_class[r.label].push((k, pos));
            }
        }
        let by_client = &self.by_client;
        for list in &mut self.by_class {
            list.sort_by_key(|&(k, pos)| (k, by_client[k][pos].round));
        }
    }

    fn check_client(&self, k: usize) -> Result<()> {
        if k >= self.clients {
            return Err(Error::Input(format!(
                "client {k} out of range for {} clients",
                self.clients
            )));
        }
        Ok(())
    }

    /// Copy of client `k`'s entry; empty when nothing was stored.
    pub fn fetch_by_client(&self, k: usize) -> Result<Vec<DistilledRecord>> {
        self.check_client(k)?;
        Ok(self.by_client[k].clone())
    }

    pub fn entry_is_empty(&self, k: usize) -> Result<bool> {
        self.check_client(k)?;
        Ok(self.by_client[k].is_empty())
    }

    /// All records labeled `c`, ordered by `(producer, round)`.
    pub fn fetch_by_class(&self, c: usize) -> Result<Vec<DistilledRecord>> {
        if c >= self.classes {
            return Err(Error::Input(format!(
                "class {c} out of range for {} classes",
                self.classes
            )));
        }
        Ok(self.by_class[c]
            .iter()
            .map(|&(k, pos)| self.by_client[k][pos].clone())
            .collect())
    }

    pub fn class_size(&self, c: usize) -> usize {
        self.by_class.get(c).map_or(0, Vec::len)
    }

    /// Every record, in client order.
    pub fn snapshot(&self) -> Vec<DistilledRecord> {
        self.by_client.iter().flatten().cloned().collect()
    }

    /// Number of class-`c` records a device with profile `p` receives.
    pub fn planned_count(&self, c: usize, p: f64, tau: f64) -> usize {
        sample_count(tau, p, self.class_size(c))
    }

    /// Per class `c`, draws `round((τ + (1−τ)·p_c) · |S_c|)` records uniformly
    /// without replacement and concatenates the draws in class order.
    pub fn sample_for_device(&self, profile: &LabelProfile, tau: f64, seed: u64) -> Result<Vec<DistilledRecord>> {
        self.sample_for_device_with(profile, tau, seed, 0, SamplingMode::ExactCount)
    }

    pub fn sample_for_device_with(
        &self,
        profile: &LabelProfile,
        tau: f64,
        seed: u64,
        round: usize,
        mode: SamplingMode,
    ) -> Result<Vec<DistilledRecord>> {
        if profile.freqs.len() != self.classes {
            return Err(Error::Input(format!(
                "profile has {} classes, cache has {}",
                profile.freqs.len(),
                self.classes
            )));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Input(format!("tau must be in [0, 1], got {tau}")));
        }
        let mut rng = stream_rng(seed, Stream::Sampling, &[profile.client_id as u64, round as u64]);
        let mut out = Vec::new();
        for (c, &p) in profile.freqs.iter().enumerate() {
            let members = &self.by_class[c];
            let size = members.len();
            let chosen: Vec<usize> = match mode {
                SamplingMode::ExactCount => {
                    let n = sample_count(tau, p, size);
                    let mut picked = index::sample(&mut rng, size, n).into_vec();
                    picked.sort_unstable();
                    picked
                }
                SamplingMode::Bernoulli => {
                    let rate = (tau + (1.0 - tau) * p).clamp(0.0, 1.0);
                    (0..size).filter(|_| rng.random::<f64>() < rate).collect()
                }
            };
            out.extend(chosen.into_iter().map(|i| {
                let (k, pos) = members[i];
                self.by_client[k][pos].clone()
            }));
        }
        Ok(out)
    }
}

/// `round((τ + (1−τ)·p) · size)` clamped to `[0, size]`.
pub fn sample_count(tau: f64, p: f64, size: usize) -> usize {
    let raw = ((tau + (1.0 - tau) * p) * size as f64).round();
    if raw.is_nan() {
        return 0;
    }
    (raw.max(0.0) as usize).min(size)
}

/// A cache behind a reader-writer lock: writers replace one entry atomically,
/// readers always see a whole entry.
#[derive(Debug)]
pub struct SharedCache {
    inner: RwLock<KnowledgeCache>,
}

impl SharedCache {
    pub fn new(cache: KnowledgeCache) -> Self {
        Self {
            inner: RwLock::new(cache),
        }
    }

    pub fn update_client_entry(&self, k: usize, records: Vec<DistilledRecord>) -> Result<()> {
        self.inner
            .write()
            .expect("cache lock poisoned")
            .update_client_entry(k, records)
    }

    pub fn fetch_by_client(&self, k: usize) -> Result<Vec<DistilledRecord>> {
        self.inner.read().expect("cache lock poisoned").fetch_by_client(k)
    }

    pub fn fetch_by_class(&self, c: usize) -> Result<Vec<DistilledRecord>> {
        self.inner.read().expect("cache lock poisoned").fetch_by_class(c)
    }

    pub fn sample_for_device(&self, profile: &LabelProfile, tau: f64, seed: u64) -> Result<Vec<DistilledRecord>> {
        self.inner
            .read()
            .expect("cache lock poisoned")
            .sample_for_device(profile, tau, seed)
    }

    pub fn into_inner(self) -> KnowledgeCache {
        self.inner.into_inner().expect("cache lock poisoned")
    }
}
