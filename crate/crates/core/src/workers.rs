//! Worker backends. A routed subtask goes to either a deterministic scripted
//! simulator or an OpenAI-compatible chat-completion endpoint; both return a
//! [`WorkerResponse`], never an error, once the pair has been admitted.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::pool::{AdmissiblePair, PoolRegistry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkerError {
    #[error("pair {0} is not admissible in the active registry")]
    InadmissiblePair(AdmissiblePair),
    #[error("no scripted response for fingerprint {fingerprint} / {primitive} and no default row")]
    MissingFixture { fingerprint: String, primitive: String },
    #[error("worker `{0}` has neither an endpoint nor a scripted behaviour")]
    NoBackend(String),
    #[error("competence for `{primitive}` is {value}, outside [0, 1]")]
    InvalidCompetence { primitive: String, value: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UsageRecord {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl UsageRecord {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

impl std::ops::Add for UsageRecord {
    type Output = UsageRecord;
    fn add(self, rhs: UsageRecord) -> UsageRecord {
        UsageRecord::new(
            self.prompt_tokens + rhs.prompt_tokens,
            self.completion_tokens + rhs.completion_tokens,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    Timeout,
    Refusal,
    TransportError,
}

impl ResponseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseStatus::Ok => "ok",
            ResponseStatus::Timeout => "timeout",
            ResponseStatus::Refusal => "refusal",
            ResponseStatus::TransportError => "transport_error",
        }
    }

    fn retryable(self) -> bool {
        matches!(self, ResponseStatus::Timeout | ResponseStatus::TransportError)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerRequest {
    pub pair: AdmissiblePair,
    pub instruction: String,
    pub context: String,
    pub timeout: Duration,
    pub attempt_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerResponse {
    pub observation: String,
    pub usage: UsageRecord,
    pub latency_ms: u64,
    pub status: ResponseStatus,
}

impl WorkerResponse {
    /// Builds a response, demoting `ok` with an empty observation to a refusal.
    pub fn new(observation: String, usage: UsageRecord, latency_ms: u64, status: ResponseStatus) -> Self {
        let status = match status {
            ResponseStatus::Ok if observation.trim().is_empty() => ResponseStatus::Refusal,
            other => other,
        };
        let observation = if status == ResponseStatus::Ok {
            observation
        } else {
            String::new()
        };
        Self {
            observation,
            usage,
            latency_ms,
            status,
        }
    }

    pub fn failure(status: ResponseStatus, usage: UsageRecord, latency_ms: u64) -> Self {
        Self::new(String::new(), usage, latency_ms, status)
    }

    pub fn is_ok(&self) -> bool {
        self.status == ResponseStatus::Ok
    }
}

/// Stable fingerprint of a task instruction (first 16 hex digits of SHA-256).
pub fn fingerprint(instruction: &str) -> String {
    let digest = Sha256::digest(instruction.trim().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// The two response columns of a scripted worker for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRow {
    pub correct: String,
    pub wrong: String,
    /// Forces a terminal status for this row (failure injection).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<ResponseStatus>,
}

impl ResponseRow {
    pub fn new(correct: &str, wrong: &str) -> Self {
        Self {
            correct: correct.to_string(),
            wrong: wrong.to_string(),
            status: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ResponseEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instruction: Option<String>,
    primitive: String,
    #[serde(flatten)]
    row: ResponseRow,
}

/// Response table keyed by (task fingerprint, primitive). On disk it is a
/// list of rows naming either a `fingerprint` or the raw `instruction`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResponseTable(BTreeMap<(String, String), ResponseRow>);

impl ResponseTable {
    pub fn insert(&mut self, instruction: &str, primitive: &str, row: ResponseRow) {
        self.0.insert((fingerprint(instruction), primitive.to_string()), row);
    }

    pub fn get(&self, fingerprint: &str, primitive: &str) -> Option<&ResponseRow> {
        self.0.get(&(fingerprint.to_string(), primitive.to_string()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Serialize for ResponseTable {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<ResponseEntry> = self
            .0
            .iter()
            .map(|((fp, prim), row)| ResponseEntry {
                fingerprint: Some(fp.clone()),
                instruction: None,
                primitive: prim.clone(),
                row: row.clone(),
            })
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ResponseTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<ResponseEntry>::deserialize(d)?;
        let mut map = BTreeMap::new();
        for entry in rows {
            let fp = match (entry.fingerprint, entry.instruction) {
                (Some(fp), _) => fp,
                (None, Some(instr)) => fingerprint(&instr),
                (None, None) => {
                    return Err(serde::de::Error::custom(
                        "response row needs `fingerprint` or `instruction`",
                    ))
                }
            };
            map.insert((fp, entry.primitive), entry.row);
        }
        Ok(ResponseTable(map))
    }
}

fn default_competence() -> f64 {
    1.0
}

/// Deterministic desk-scale stand-in for a frozen worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedBehaviour {
    /// Success probability per primitive.
    #[serde(default)]
    pub competence: BTreeMap<String, f64>,
    /// Used for primitives missing from `competence`.
    #[serde(default = "default_competence")]
    pub default_competence: f64,
    #[serde(default)]
    pub responses: ResponseTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_row: Option<ResponseRow>,
    /// Usage reported on every answered call, success or not.
    pub token_profile: UsageRecord,
    /// Simulated latency reported in the response.
    #[serde(default)]
    pub latency_ms: u64,
    /// Actually wait `latency_ms` before answering.
    #[serde(default)]
    pub sleep: bool,
}

impl ScriptedBehaviour {
    pub fn new(token_profile: UsageRecord) -> Self {
        Self {
            competence: BTreeMap::new(),
            default_competence: 1.0,
            responses: ResponseTable::default(),
            default_row: None,
            token_profile,
            latency_ms: 0,
            sleep: false,
        }
    }

    pub fn competence_for(&self, primitive: &str) -> f64 {
        self.competence
            .get(primitive)
            .copied()
            .unwrap_or(self.default_competence)
    }

    pub fn validate(&self) -> Result<(), WorkerError> {
        let bad = self
            .competence
            .iter()
            .map(|(k, v)| (k.as_str(), *v))
            .chain(std::iter::once(("<default>", self.default_competence)))
            .find(|(_, v)| !(0.0..=1.0).contains(v));
        match bad {
            Some((primitive, value)) => Err(WorkerError::InvalidCompetence {
                primitive: primitive.to_string(),
                value,
            }),
            None => Ok(()),
        }
    }
}

/// Folds byte strings into a 64-bit seed.
pub fn mix_seed(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Evaluates one request against a scripted behaviour. Success is drawn
/// from the primitive's competence with an RNG seeded by the request.
pub fn scripted_worker_eval(
    behaviour: &ScriptedBehaviour,
    request: &WorkerRequest,
) -> Result<WorkerResponse, WorkerError> {
    let fp = fingerprint(&request.instruction);
    let primitive = &request.pair.primitive_id;
    let row = behaviour
        .responses
        .get(&fp, primitive)
        .or(behaviour.default_row.as_ref())
        .ok_or_else(|| WorkerError::MissingFixture {
            fingerprint: fp.clone(),
            primitive: primitive.clone(),
        })?;

    if let Some(status) = row.status.filter(|s| *s != ResponseStatus::Ok) {
        return Ok(WorkerResponse::failure(
            status,
            UsageRecord::default(),
            behaviour.latency_ms,
        ));
    }
    if Duration::from_millis(behaviour.latency_ms) > request.timeout {
        return Ok(WorkerResponse::failure(
            ResponseStatus::Timeout,
            UsageRecord::default(),
            request.timeout.as_millis() as u64,
        ));
    }

    let seed = mix_seed(&[
        &request.attempt_seed.to_le_bytes(),
        request.pair.worker_id.as_bytes(),
        primitive.as_bytes(),
        fp.as_bytes(),
    ]);
    let draw: f64 = ChaCha8Rng::seed_from_u64(seed).random();
    let success = draw < behaviour.competence_for(primitive);
    let observation = if success { &row.correct } else { &row.wrong };
    Ok(WorkerResponse::new(
        observation.clone(),
        behaviour.token_profile,
        behaviour.latency_ms,
        ResponseStatus::Ok,
    ))
}

#[async_trait]
pub trait WorkerBackend: Send + Sync {
    /// One attempt. Never fails: every outcome is a response.
    async fn call(&self, request: &WorkerRequest) -> WorkerResponse;
}

/// Scripted workers keyed by worker id.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    behaviours: BTreeMap<String, ScriptedBehaviour>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_worker(mut self, worker_id: &str, behaviour: ScriptedBehaviour) -> Self {
        self.behaviours.insert(worker_id.to_string(), behaviour);
        self
    }

    pub fn insert(&mut self, worker_id: &str, behaviour: ScriptedBehaviour) {
        self.behaviours.insert(worker_id.to_string(), behaviour);
    }

    pub fn behaviour_mut(&mut self, worker_id: &str) -> Option<&mut ScriptedBehaviour> {
        self.behaviours.get_mut(worker_id)
    }
}

#[async_trait]
impl WorkerBackend for ScriptedBackend {
    async fn call(&self, request: &WorkerRequest) -> WorkerResponse {
        let Some(behaviour) = self.behaviours.get(&request.pair.worker_id) else {
            return WorkerResponse::failure(ResponseStatus::TransportError, UsageRecord::default(), 0);
        };
        if behaviour.sleep && behaviour.latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(behaviour.latency_ms).min(request.timeout)).await;
        }
        match scripted_worker_eval(behaviour, request) {
            Ok(resp) => resp,
            // nothing scripted for this task: the worker declines
            Err(_) => WorkerResponse::failure(ResponseStatus::Refusal, UsageRecord::default(), behaviour.latency_ms),
        }
    }
}

/// Environment variable holding the bearer token for a worker.
pub fn api_key_var(worker_id: &str) -> String {
    let suffix: String = worker_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("ORCHESTRA_API_KEY_{suffix}")
}

/// Chat-completion client for workers with an `endpoint`.
pub struct ChatCompletionBackend {
    client: reqwest::Client,
    registry: Arc<PoolRegistry>,
    permits: Arc<Semaphore>,
}

impl ChatCompletionBackend {
    pub fn new(registry: Arc<PoolRegistry>, max_in_flight: usize) -> Self {
        Self {
            client: reqwest::Client::new(),
            registry,
            permits: Arc::new(Semaphore::new(max_in_flight.max(1))),
        }
    }

    fn request_body(&self, model: &str, request: &WorkerRequest) -> serde_json::Value {
        let contract = self
            .registry
            .primitive(&request.pair.primitive_id)
            .map(|p| p.contract.clone())
            .unwrap_or_default();
        let system = format!("Primitive: {}. {}", request.pair.primitive_id, contract);
        let user = if request.context.is_empty() {
            request.instruction.clone()
        } else {
            format!("{}\n\n{}", request.context, request.instruction)
        };
        serde_json::json!({
            "model": model,
            "messages": [
                {"role": "system", "content": system.trim()},
                {"role": "user", "content": user},
            ],
        })
    }
}

/// Reads `choices[0].message.content` and `usage` from a chat-completion body.
pub fn parse_chat_completion(body: &serde_json::Value) -> (Option<String>, UsageRecord, Option<String>) {
    let choice = body.get("choices").and_then(|c| c.get(0));
    let content = choice
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(|c| c.as_str())
        .map(str::to_string);
    let finish = choice
        .and_then(|c| c.get("finish_reason"))
        .and_then(|f| f.as_str())
        .map(str::to_string);
    let usage = body.get("usage");
    let count = |key: &str| usage.and_then(|u| u.get(key)).and_then(|v| v.as_u64()).unwrap_or(0);
    (
        content,
        UsageRecord::new(count("prompt_tokens"), count("completion_tokens")),
        finish,
    )
}

#[async_trait]
impl WorkerBackend for ChatCompletionBackend {
    async fn call(&self, request: &WorkerRequest) -> WorkerResponse {
        let started = Instant::now();
        let elapsed = |s: Instant| s.elapsed().as_millis() as u64;
        let Some(worker) = self.registry.worker(&request.pair.worker_id) else {
            return WorkerResponse::failure(ResponseStatus::TransportError, UsageRecord::default(), 0);
        };
        let Some(endpoint) = worker.endpoint.as_deref() else {
            return WorkerResponse::failure(ResponseStatus::TransportError, UsageRecord::default(), 0);
        };
        let _permit = match self.permits.acquire().await {
            Ok(p) => p,
            Err(_) => return WorkerResponse::failure(ResponseStatus::TransportError, UsageRecord::default(), 0),
        };
        let url = format!("{}/chat/completions", endpoint.trim_end_matches('/'));
        let mut builder = self
            .client
            .post(url)
            .timeout(request.timeout)
            .json(&self.request_body(worker.wire_model(), request));
        if let Ok(key) = std::env::var(api_key_var(&worker.worker_id)) {
            builder = builder.bearer_auth(key);
        }
        let response = match builder.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return WorkerResponse::failure(ResponseStatus::Timeout, UsageRecord::default(), elapsed(started))
            }
            Err(_) => {
                return WorkerResponse::failure(
                    ResponseStatus::TransportError,
                    UsageRecord::default(),
                    elapsed(started),
                )
            }
        };
        let status = response.status();
        let body: serde_json::Value = match response.json().await {
            Ok(v) => v,
            Err(e) if e.is_timeout() => {
                return WorkerResponse::failure(ResponseStatus::Timeout, UsageRecord::default(), elapsed(started))
            }
            Err(_) if status.is_success() => {
                return WorkerResponse::failure(ResponseStatus::Refusal, UsageRecord::default(), elapsed(started))
            }
            Err(_) => serde_json::Value::Null,
        };
        let (content, usage, finish) = parse_chat_completion(&body);
        if status.is_server_error() || status.as_u16() == 429 {
            return WorkerResponse::failure(ResponseStatus::TransportError, usage, elapsed(started));
        }
        if !status.is_success() || finish.as_deref() == Some("content_filter") {
            return WorkerResponse::failure(ResponseStatus::Refusal, usage, elapsed(started));
        }
        WorkerResponse::new(content.unwrap_or_default(), usage, elapsed(started), ResponseStatus::Ok)
    }
}

/// Sends each request to the backend registered for its worker.
#[derive(Clone, Default)]
pub struct BackendRouter {
    routes: BTreeMap<String, Arc<dyn WorkerBackend>>,
}

impl BackendRouter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn route(mut self, worker_id: &str, backend: Arc<dyn WorkerBackend>) -> Self {
        self.routes.insert(worker_id.to_string(), backend);
        self
    }

    /// Endpoint workers share one HTTP client; the rest use their scripted
    /// behaviour from the registry.
    pub fn from_registry(registry: Arc<PoolRegistry>, max_in_flight: usize) -> Result<Self, WorkerError> {
        let http: Arc<dyn WorkerBackend> = Arc::new(ChatCompletionBackend::new(registry.clone(), max_in_flight));
        let mut router = BackendRouter::new();
        for worker in registry.workers() {
            let backend: Arc<dyn WorkerBackend> = if worker.endpoint.is_some() {
                http.clone()
            } else if let Some(behaviour) = &worker.scripted {
                behaviour.validate()?;
                Arc::new(ScriptedBackend::new().with_worker(&worker.worker_id, behaviour.clone()))
            } else {
                return Err(WorkerError::NoBackend(worker.worker_id.clone()));
            };
            router.routes.insert(worker.worker_id.clone(), backend);
        }
        Ok(router)
    }
}

#[async_trait]
impl WorkerBackend for BackendRouter {
    async fn call(&self, request: &WorkerRequest) -> WorkerResponse {
        match self.routes.get(&request.pair.worker_id) {
            Some(backend) => backend.call(request).await,
            None => WorkerResponse::failure(ResponseStatus::TransportError, UsageRecord::default(), 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            backoff_ms: 100,
        }
    }
}

/// Dispatches one request with bounded retries on timeouts and transport
/// errors. Usage and latency of every attempt are summed into the result.
pub async fn dispatch_call(
    registry: &PoolRegistry,
    backend: &dyn WorkerBackend,
    request: &WorkerRequest,
    retry: RetryPolicy,
) -> Result<WorkerResponse, WorkerError> {
    if !registry.is_admissible(&request.pair.worker_id, &request.pair.primitive_id) {
        return Err(WorkerError::InadmissiblePair(request.pair.clone()));
    }
    let mut usage = UsageRecord::default();
    let mut latency = 0u64;
    let mut attempt = 0u32;
    loop {
        let mut req = request.clone();
        if attempt > 0 {
            req.attempt_seed = mix_seed(&[&request.attempt_seed.to_le_bytes(), &attempt.to_le_bytes()]);
        }
        let resp = backend.call(&req).await;
        usage = usage + resp.usage;
        latency += resp.latency_ms;
        if !resp.status.retryable() || attempt >= retry.max_retries {
            return Ok(WorkerResponse::new(resp.observation, usage, latency, resp.status));
        }
        attempt += 1;
        if retry.backoff_ms > 0 {
            tokio::time::sleep(Duration::from_millis(retry.backoff_ms * u64::from(attempt))).await;
        }
    }
}
