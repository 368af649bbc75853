//! Trajectory cost, rolling cost normalization, the verifier-gated terminal
//! reward and bounded per-turn shaping.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{validate_trajectory, TrajectoryDoc};
use crate::pool::{AdmissiblePair, PoolRegistry, Usd};
use crate::scheduler::TurnRecord;
use crate::workers::UsageRecord;

/// Upper bound of the shaping score paid to incorrect rollouts.
pub const SHAPING_CAP: f64 = 0.10;
const SHAPING_STEP: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("{name} = {value} is outside {range}")]
    Domain {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("normalizer needs lo_pct < hi_pct within [0, 100], got {lo} and {hi}")]
    Percentiles { lo: f64, hi: f64 },
}

fn check_range(name: &'static str, value: f64, lo: f64, hi: f64, range: &'static str) -> Result<(), RewardError> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(())
    } else {
        Err(RewardError::Domain { name, value, range })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub turn: u32,
    pub subtask_id: u32,
    pub pair: AdmissiblePair,
    pub usage: UsageRecord,
    pub cost_usd: Usd,
}

/// Every billed worker call of one trajectory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub entries: Vec<CostEntry>,
}

impl CostLedger {
    pub fn push(&mut self, entry: CostEntry) {
        self.entries.push(entry);
    }

    pub fn total(&self) -> Usd {
        trajectory_cost(self)
    }

    pub fn usage(&self) -> UsageRecord {
        self.entries.iter().fold(UsageRecord::default(), |acc, e| acc + e.usage)
    }
}

/// c(τ): the exact sum of worker-call costs. Router tokens are not billed.
pub fn trajectory_cost(ledger: &CostLedger) -> Usd {
    ledger.entries.iter().map(|e| e.cost_usd).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizerConfig {
    pub capacity: usize,
    pub lo_pct: f64,
    pub hi_pct: f64,
    /// Below this many samples the normalized cost is 0.
    pub warmup: usize,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        Self {
            capacity: 1000,
            lo_pct: 5.0,
            hi_pct: 95.0,
            warmup: 30,
        }
    }
}

/// Ring buffer of the most recent √c values.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerState {
    config: NormalizerConfig,
    buffer: VecDeque<f64>,
}

/// Nearest-rank percentile of an ascending slice: the value at rank ⌈p·n/100⌉.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((pct * n as f64) / 100.0).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

impl NormalizerState {
    pub fn new(config: NormalizerConfig) -> Result<Self, RewardError> {
        let NormalizerConfig { lo_pct, hi_pct, .. } = config;
        if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
            return Err(RewardError::Percentiles { lo: lo_pct, hi: hi_pct });
        }
        Ok(Self {
            config,
            buffer: VecDeque::with_capacity(config.capacity),
        })
    }

    pub fn config(&self) -> &NormalizerConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    /// Appends √c, evicting the oldest value when full.
    pub fn push(&mut self, cost: Usd) {
        self.push_sqrt(cost.as_f64().max(0.0).sqrt());
    }

    pub fn push_sqrt(&mut self, sqrt_cost: f64) {
        if self.config.capacity == 0 {
            return;
        }
        if self.buffer.len() == self.config.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(sqrt_cost);
    }

    /// Current (lo, hi) bracket, or `None` during warm-up.
    pub fn bracket(&self) -> Option<(f64, f64)> {
        if self.buffer.len() < self.config.warmup.max(1) {
            return None;
        }
        let mut sorted: Vec<f64> = self.buffer.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        Some((
            nearest_rank(&sorted, self.config.lo_pct)?,
            nearest_rank(&sorted, self.config.hi_pct)?,
        ))
    }
}

/// ĉ ∈ [0, 1]: √c placed inside the current percentile bracket.
pub fn normalize_cost(state: &NormalizerState, cost: Usd) -> f64 {
    normalize_sqrt(state, cost.as_f64().max(0.0).sqrt())
}

pub fn normalize_sqrt(state: &NormalizerState, sqrt_cost: f64) -> f64 {
    match state.bracket() {
        Some((lo, hi)) if hi > lo => ((sqrt_cost - lo) / (hi - lo)).clamp(0.0, 1.0),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalReward {
    pub b: bool,
    pub c_hat: f64,
    pub shaping_s: f64,
    pub value: f64,
}

/// R = b·[(1−α) + α(1−ĉ)] + (1−b)·S.
pub fn terminal_reward(b: bool, c_hat: f64, shaping_s: f64, alpha: f64) -> Result<TerminalReward, RewardError> {
    check_range("c_hat", c_hat, 0.0, 1.0, "[0, 1]")?;
    check_range("shaping_s", shaping_s, 0.0, SHAPING_CAP, "[0, 0.10]")?;
    check_range("alpha", alpha, 0.0, 1.0, "[0, 1]")?;
    let value = if b {
        (1.0 - alpha) + alpha * (1.0 - c_hat)
    } else {
        shaping_s
    };
    Ok(TerminalReward {
        b,
        c_hat,
        shaping_s,
        value,
    })
}

/// S(τ): 0.05 for a grammar-valid plan-and-route emission, plus 0.05 when
/// every route in the document resolves to an admissible pair.
pub fn shaping_score(doc: &TrajectoryDoc, registry: &PoolRegistry) -> f64 {
    if doc.turns.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    if validate_trajectory(doc, None).valid {
        s += SHAPING_STEP;
    }
    let mut routes = doc.routes().peekable();
    if routes.peek().is_some()
        && routes.all(|r| r.nested.is_empty() && registry.vocabulary_problem(&r.model, &r.skill).is_none())
    {
        s += SHAPING_STEP;
    }
    f64::min(s, SHAPING_CAP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapingEvent {
    SchemaValidPlan,
    SchemaValidRoutes,
    InvalidEmission,
    RepairTriggered,
    PrematureFinal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingSignal {
    pub turn: u32,
    pub r: f64,
    pub events: Vec<ShapingEvent>,
}

/// r_t: ±η/2 for a valid or invalid emission, +η/2 more for a repair that
/// answers a failed verify, clamped to [−η, η].
pub fn turn_shaping(record: &TurnRecord, eta: f64) -> Result<ShapingSignal, RewardError> {
    if !(eta > 0.0 && eta <= 0.2) {
        return Err(RewardError::Domain {
            name: "eta",
            value: eta,
            range: "(0, 0.2]",
        });
    }
    let half = eta / 2.0;
    let mut r = if record.events.contains(&ShapingEvent::InvalidEmission) {
        -half
    } else {
        half
    };
    if record.events.contains(&ShapingEvent::RepairTriggered) {
        r += half;
    }
    Ok(ShapingSignal {
        turn: record.turn,
        r: r.clamp(-eta, eta),
        events: record.events.clone(),
    })
}

fn bool_as_int<S: serde::Serializer>(b: &bool, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*b))
}

fn int_as_bool<'de, D: serde::Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    match u8::deserialize(d)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(serde::de::Error::custom(format!("b must be 0 or 1, got {other}"))),
    }
}

/// Per-episode reward line appended to the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub episode_id: String,
    pub task_id: String,
    pub attempt: u32,
    pub benchmark: String,
    #[serde(serialize_with = "bool_as_int", deserialize_with = "int_as_bool")]
    pub b: bool,
    pub c_usd: Usd,
    pub c_hat: f64,
    pub shaping_s: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub per_turn_r: Vec<f64>,
    pub context_tokens: u64,
    /// Set when the verifier could not run; such samples skip curriculum gating.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub infra: bool,
}
