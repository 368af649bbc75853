//! The closed worker pool: workers, routing primitives, admissible
//! (worker, primitive) pairs, per-token pricing and per-episode blind
//! labelling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, AddAssign};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::workers::{ScriptedBehaviour, UsageRecord};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("registry parse error: {0}")]
    Parse(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("worker `{worker}` claims unknown primitive `{primitive}`")]
    UnknownPrimitive { worker: String, primitive: String },
    #[error("the worker pool is empty")]
    EmptyPool,
    #[error("the primitive vocabulary is empty")]
    EmptyVocabulary,
    #[error("worker `{0}` has a negative or non-finite price")]
    InvalidPrice(String),
    #[error("pair ({worker}, {primitive}) is not admissible")]
    InadmissiblePair { worker: String, primitive: String },
}

/// An exact USD amount stored as an integer count of pico-dollars (1e-12).
///
/// Prices quoted per million tokens with up to six decimals convert to an
/// integer pico-dollar rate per token, so ledger sums never drift.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Usd(i128);

impl Usd {
    pub const ZERO: Usd = Usd(0);
    const PICO_PER_USD: f64 = 1e12;

    pub fn from_pico(pico: i128) -> Self {
        Usd(pico)
    }

    pub fn pico(self) -> i128 {
        self.0
    }

    pub fn from_f64(usd: f64) -> Self {
        Usd((usd * Self::PICO_PER_USD).round() as i128)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / Self::PICO_PER_USD
    }
}

impl Add for Usd {
    type Output = Usd;
    fn add(self, rhs: Usd) -> Usd {
        Usd(self.0 + rhs.0)
    }
}

impl AddAssign for Usd {
    fn add_assign(&mut self, rhs: Usd) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Usd {
    fn sum<I: Iterator<Item = Usd>>(iter: I) -> Usd {
        iter.fold(Usd::ZERO, Add::add)
    }
}

impl fmt::Display for Usd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${:.6}", self.as_f64())
    }
}

impl Serialize for Usd {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Usd {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Usd::from_f64(f64::deserialize(d)?))
    }
}

/// USD per 1e6 tokens, held as integer pico-dollars per token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PricePerMillion {
    pico_per_token: i128,
}

impl PricePerMillion {
    pub fn from_usd(usd_per_million: f64) -> Self {
        // USD/1e6 tokens * 1e12 pico/USD / 1e6 = pico per token
        Self {
            pico_per_token: (usd_per_million * 1e6).round() as i128,
        }
    }

    pub fn usd(self) -> f64 {
        self.pico_per_token as f64 / 1e6
    }

    pub fn cost(self, tokens: u64) -> Usd {
        Usd::from_pico(self.pico_per_token * tokens as i128)
    }
}

impl Serialize for PricePerMillion {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.usd())
    }
}

impl<'de> Deserialize<'de> for PricePerMillion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = f64::deserialize(d)?;
        if !raw.is_finite() || raw < 0.0 {
            return Err(serde::de::Error::custom(format!("invalid price {raw}")));
        }
        Ok(Self::from_usd(raw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveCluster {
    AnswerReason,
    Retrieve,
    Skills,
    Execute,
    Symbolic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub primitive_id: String,
    pub cluster: PrimitiveCluster,
    #[serde(default)]
    pub contract: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSpec {
    pub worker_id: String,
    #[serde(default)]
    pub display_name: String,
    /// Base URL of an OpenAI-compatible endpoint; absent for scripted workers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Model name sent on the wire; defaults to `worker_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub prompt_price: PricePerMillion,
    pub completion_price: PricePerMillion,
    pub skills: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripted: Option<ScriptedBehaviour>,
}

impl WorkerSpec {
    pub fn wire_model(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.worker_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdmissiblePair {
    pub worker_id: String,
    pub primitive_id: String,
}

impl AdmissiblePair {
    pub fn new(worker_id: &str, primitive_id: &str) -> Self {
        Self {
            worker_id: worker_id.to_string(),
            primitive_id: primitive_id.to_string(),
        }
    }
}

impl fmt::Display for AdmissiblePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.worker_id, self.primitive_id)
    }
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    workers: Vec<WorkerSpec>,
    primitives: Vec<PrimitiveSpec>,
}

/// Immutable registry of M, S and P. Shareable across episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolRegistry {
    workers: Vec<WorkerSpec>,
    primitives: Vec<PrimitiveSpec>,
    #[serde(skip)]
    worker_index: BTreeMap<String, usize>,
    #[serde(skip)]
    primitive_index: BTreeMap<String, usize>,
}

impl PoolRegistry {
    pub fn new(workers: Vec<WorkerSpec>, primitives: Vec<PrimitiveSpec>) -> Result<Self, PoolError> {
        if workers.is_empty() {
            return Err(PoolError::EmptyPool);
        }
        if primitives.is_empty() {
            return Err(PoolError::EmptyVocabulary);
        }
        let mut primitive_index = BTreeMap::new();
        for (i, p) in primitives.iter().enumerate() {
            if primitive_index.insert(p.primitive_id.clone(), i).is_some() {
                return Err(PoolError::DuplicateId(p.primitive_id.clone()));
            }
        }
        let mut worker_index = BTreeMap::new();
        for (i, w) in workers.iter().enumerate() {
            if worker_index.insert(w.worker_id.clone(), i).is_some() {
                return Err(PoolError::DuplicateId(w.worker_id.clone()));
            }
            if let Some(unknown) = w.skills.iter().find(|s| !primitive_index.contains_key(*s)) {
                return Err(PoolError::UnknownPrimitive {
                    worker: w.worker_id.clone(),
                    primitive: unknown.clone(),
                });
            }
        }
        Ok(Self {
            workers,
            primitives,
            worker_index,
            primitive_index,
        })
    }

    pub fn workers(&self) -> &[WorkerSpec] {
        &self.workers
    }

    pub fn primitives(&self) -> &[PrimitiveSpec] {
        &self.primitives
    }

    pub fn worker(&self, worker_id: &str) -> Option<&WorkerSpec> {
        self.worker_index.get(worker_id).map(|i| &self.workers[*i])
    }

    pub fn primitive(&self, primitive_id: &str) -> Option<&PrimitiveSpec> {
        self.primitive_index.get(primitive_id).map(|i| &self.primitives[*i])
    }

    pub fn is_admissible(&self, worker_id: &str, primitive_id: &str) -> bool {
        self.worker(worker_id).is_some_and(|w| w.skills.contains(primitive_id))
    }

    /// Every admissible pair, in (worker, primitive) order.
    pub fn admissible_pairs(&self) -> Vec<AdmissiblePair> {
        let mut pairs: Vec<AdmissiblePair> = self
            .workers
            .iter()
            .flat_map(|w| w.skills.iter().map(|s| AdmissiblePair::new(&w.worker_id, s)))
            .collect();
        pairs.sort();
        pairs
    }

    /// Why a (model, skill) route does not resolve, if it does not.
    pub fn vocabulary_problem(&self, model: &str, skill: &str) -> Option<String> {
        match (self.worker(model), self.primitive(skill)) {
            (None, _) => Some(format!("unknown model `{model}`")),
            (_, None) => Some(format!("unknown skill `{skill}`")),
            (Some(w), Some(_)) if !w.skills.contains(skill) => {
                Some(format!("pair ({model}, {skill}) is not admissible"))
            }
            _ => None,
        }
    }
}

/// Parses a JSON registry with top-level `workers` and `primitives`.
pub fn load_registry(source: &str) -> Result<PoolRegistry, PoolError> {
    let file: RegistryFile = serde_json::from_str(source).map_err(|e| PoolError::Parse(e.to_string()))?;
    PoolRegistry::new(file.workers, file.primitives)
}

/// Billed cost of one call: prompt and completion tokens at their per-million rates.
pub fn pair_cost(registry: &PoolRegistry, pair: &AdmissiblePair, usage: &UsageRecord) -> Result<Usd, PoolError> {
    let worker = registry
        .worker(&pair.worker_id)
        .filter(|w| w.skills.contains(&pair.primitive_id))
        .ok_or_else(|| PoolError::InadmissiblePair {
            worker: pair.worker_id.clone(),
            primitive: pair.primitive_id.clone(),
        })?;
    Ok(worker.prompt_price.cost(usage.prompt_tokens) + worker.completion_price.cost(usage.completion_tokens))
}

/// Per-episode bijection between worker ids and `Worker k` labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymizedView {
    pub episode_seed: u64,
    /// `labels[k]` is the worker id behind `Worker {k+1}`.
    order: Vec<String>,
}

impl AnonymizedView {
    pub fn label(index: usize) -> String {
        format!("Worker {}", index + 1)
    }

    /// The identity mapping, used when blind routing is disabled.
    pub fn identity(registry: &PoolRegistry) -> Self {
        Self {
            episode_seed: 0,
            order: registry.workers().iter().map(|w| w.worker_id.clone()).collect(),
        }
    }

    pub fn label_of(&self, worker_id: &str) -> Option<String> {
        self.order.iter().position(|w| w == worker_id).map(Self::label)
    }

    pub fn worker_of(&self, label: &str) -> Option<&str> {
        let index: usize = label.strip_prefix("Worker ")?.trim().parse().ok()?;
        self.order.get(index.checked_sub(1)?).map(String::as_str)
    }

    /// (label, worker id) pairs in label order.
    pub fn entries(&self) -> impl Iterator<Item = (String, &str)> {
        self.order.iter().enumerate().map(|(i, w)| (Self::label(i), w.as_str()))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Seeded shuffle of the pool; the same (registry, seed) always yields the
/// same mapping.
pub fn anonymize_pool(registry: &PoolRegistry, episode_seed: u64) -> AnonymizedView {
    let mut order: Vec<String> = registry.workers().iter().map(|w| w.worker_id.clone()).collect();
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    order.shuffle(&mut rng);
    AnonymizedView { episode_seed, order }
}
