//! Group-relative credit assignment: turn returns, the five advantage
//! estimators, and the masked clipped surrogate with its KL term.
//!
//! Everything here is a pure function of numbers supplied by the caller;
//! log-probabilities come from an external trainer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::ActionKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CreditError {
    #[error("rollout {rollout}: {field} has {got} entries, expected {expected}")]
    LengthMismatch {
        rollout: String,
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("group {0} needs at least two rollouts")]
    GroupTooSmall(String),
    #[error("rollout {0} has no turns")]
    EmptyRollout(String),
    #[error("rollout {rollout} lacks {what} required by the {estimator} estimator")]
    MissingInput {
        rollout: String,
        what: &'static str,
        estimator: &'static str,
    },
    #[error("gamma {0} is outside (0, 1]")]
    Gamma(f64),
    #[error("ratio must be positive and finite, got {0}")]
    NonPositiveRatio(f64),
    #[error("rollout {rollout}: token {index} is outside the supplied log-prob arrays")]
    IndexOutOfRange { rollout: String, index: usize },
    #[error("rollout {rollout}: non-finite log-prob at masked token {index}")]
    NonFinite { rollout: String, index: usize },
    #[error("no advantage for rollout {rollout} turn {turn}")]
    MissingAdvantage { rollout: String, turn: u32 },
    #[error("token {index} assigned to more than one segment")]
    OverlappingMask { index: usize },
}

/// Where a branch leaves its shared prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    /// Siblings share this prefix id.
    pub parent: String,
    /// First turn (1-based) after the shared prefix.
    pub branch_turn: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub rollout_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
    /// Terminal reward R(τ).
    #[serde(rename = "R")]
    pub terminal_reward: f64,
    /// Per-turn shaping r_t; its length is the turn count.
    pub shaping: Vec<f64>,
    pub action_kinds: Vec<ActionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<Branch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_keys: Option<Vec<String>>,
    /// Per-turn scores U_t for the multi-turn variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_scores: Option<Vec<f64>>,
    /// Per-turn local outcome estimates Q_t for anchor grouping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_values: Option<Vec<f64>>,
    /// Per-turn verified progress V_t for the shaped-score variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<Vec<f64>>,
    /// Per-turn delegation cost C_t for the shaped-score variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delegation_cost: Option<Vec<f64>>,
}

impl Rollout {
    /// A chain rollout with no variant inputs.
    pub fn chain(rollout_id: &str, terminal_reward: f64, shaping: Vec<f64>, action_kinds: Vec<ActionKind>) -> Self {
        Self {
            rollout_id: rollout_id.to_string(),
            trajectory: None,
            terminal_reward,
            shaping,
            action_kinds,
            branch: None,
            anchor_keys: None,
            turn_scores: None,
            anchor_values: None,
            progress: None,
            delegation_cost: None,
        }
    }

    pub fn turns(&self) -> usize {
        self.shaping.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    fn check(&self) -> Result<(), CreditError> {
        if self.rollouts.len() < 2 {
            return Err(CreditError::GroupTooSmall(self.query_id.clone()));
        }
        for r in &self.rollouts {
            if r.turns() == 0 {
                return Err(CreditError::EmptyRollout(r.rollout_id.clone()));
            }
            check_len(r, "action_kinds", r.action_kinds.len())?;
            for (field, v) in [
                ("anchor_keys", r.anchor_keys.as_ref().map(Vec::len)),
                ("turn_scores", r.turn_scores.as_ref().map(Vec::len)),
                ("anchor_values", r.anchor_values.as_ref().map(Vec::len)),
                ("progress", r.progress.as_ref().map(Vec::len)),
                ("delegation_cost", r.delegation_cost.as_ref().map(Vec::len)),
            ] {
                if let Some(n) = v {
                    check_len(r, field, n)?;
                }
            }
        }
        Ok(())
    }
}

fn check_len(r: &Rollout, field: &'static str, got: usize) -> Result<(), CreditError> {
    if got == r.turns() {
        Ok(())
    } else {
        Err(CreditError::LengthMismatch {
            rollout: r.rollout_id.clone(),
            field,
            got,
            expected: r.turns(),
        })
    }
}

/// Cohort key for turn-level standardization.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TurnKey {
    pub query_id: String,
    pub turn_index: u32,
    pub action_kind: ActionKind,
}

impl TurnKey {
    pub fn cohort_id(&self) -> String {
        format!("{}/t{}/{}", self.query_id, self.turn_index, self.action_kind.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Grpo,
    Tree,
    Mt,
    Gigpo,
    Agentic,
    /// Agentic form with the shaped score S_t = w_t·R + γ_p·V_t − α_c·C_t.
    AgenticShaped,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Grpo => "grpo",
            Estimator::Tree => "tree",
            Estimator::Mt => "mt",
            Estimator::Gigpo => "gigpo",
            Estimator::Agentic => "agentic",
            Estimator::AgenticShaped => "agentic_shaped",
        }
    }
}

/// Numeric knobs for every estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CreditConfig {
    /// Discount γ on turn returns.
    pub gamma: f64,
    pub eps_num: f64,
    /// Divide by σ+ε instead of max(σ, ε).
    pub eps_additive: bool,
    /// Turn-credit mixing weight of the multi-turn variant.
    pub rho_mix: f64,
    /// Anchor-credit mixing weight.
    pub eta_mix: f64,
    /// Weight on V_t in the shaped score.
    pub gamma_progress: f64,
    /// Weight on C_t in the shaped score.
    pub alpha_cost: f64,
}

impl Default for CreditConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            eps_num: 1e-8,
            eps_additive: false,
            rho_mix: 1.0,
            eta_mix: 1.0,
            gamma_progress: 1.0,
            alpha_cost: 0.1,
        }
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes a cohort. Singletons and σ=0 cohorts map to zeros.
pub fn standardize(values: &[f64], eps: f64, additive: bool) -> Vec<f64> {
    if values.len() < 2 {
        return vec![0.0; values.len()];
    }
    let (mean, std) = mean_std(values);
    if std == 0.0 {
        return vec![0.0; values.len()];
    }
    let denom = if additive { std + eps } else { std.max(eps) };
    values.iter().map(|v| (v - mean) / denom).collect()
}

/// R̃_{i,t} for every rollout; `out[i][t-1]` is turn t of rollout i.
pub fn turn_returns(group: &RolloutGroup, gamma: f64) -> Result<Vec<Vec<f64>>, CreditError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CreditError::Gamma(gamma));
    }
    group
        .rollouts
        .iter()
        .map(|r| {
            check_len(r, "action_kinds", r.action_kinds.len())?;
            let t_len = r.turns();
            // backward pass: G_t = r_t + γ·G_{t+1}, plus the discounted terminal term
            let mut out = vec![0.0; t_len];
            let mut tail = 0.0;
            for t in (0..t_len).rev() {
                tail = r.shaping[t] + gamma * tail;
                let steps = (t_len - 1 - t) as i32;
                out[t] = gamma.powi(steps) * r.terminal_reward + tail;
            }
            Ok(out)
        })
        .collect()
}

/// Trajectory-level group advantages A_g.
pub fn grpo_advantages(terminal: &[f64], config: &CreditConfig) -> Vec<f64> {
    standardize(terminal, config.eps_num, config.eps_additive)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRow {
    pub query_id: String,
    pub rollout_id: String,
    pub turn: u32,
    pub kind: ActionKind,
    #[serde(rename = "R_tilde")]
    pub r_tilde: f64,
    pub advantage: f64,
    pub cohort_id: String,
    pub estimator: Estimator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub estimator: Estimator,
    pub rows: Vec<AdvantageRow>,
}

impl AdvantageTable {
    pub fn get(&self, rollout_id: &str, turn: u32) -> Option<&AdvantageRow> {
        self.rows.iter().find(|r| r.rollout_id == rollout_id && r.turn == turn)
    }

    /// Row advantages grouped by cohort id.
    pub fn cohorts(&self) -> BTreeMap<&str, Vec<f64>> {
        let mut out: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for row in &self.rows {
            out.entry(row.cohort_id.as_str()).or_default().push(row.advantage);
        }
        out
    }

    pub fn advantages(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.advantage).collect()
    }
}

/// Standardizes values grouped by key; returns one value per input, in order.
fn standardize_by<K: Ord + Clone>(keys: &[K], values: &[f64], config: &CreditConfig) -> Vec<f64> {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k.clone()).or_default().push(i);
    }
    let mut out = vec![0.0; values.len()];
    for idx in groups.values() {
        let vals: Vec<f64> = idx.iter().map(|i| values[*i]).collect();
        for (i, z) in idx.iter().zip(standardize(&vals, config.eps_num, config.eps_additive)) {
            out[*i] = z;
        }
    }
    out
}

/// Flat (rollout index, turn) enumeration in table order.
fn cells(group: &RolloutGroup) -> Vec<(usize, u32)> {
    group
        .rollouts
        .iter()
        .enumerate()
        .flat_map(|(i, r)| (1..=r.turns() as u32).map(move |t| (i, t)))
        .collect()
}

fn per_turn<'a>(
    r: &'a Rollout,
    field: Option<&'a Vec<f64>>,
    what: &'static str,
    estimator: Estimator,
) -> Result<&'a Vec<f64>, CreditError> {
    field.ok_or_else(|| CreditError::MissingInput {
        rollout: r.rollout_id.clone(),
        what,
        estimator: estimator.as_str(),
    })
}

/// Â_{i,t}: turn returns standardized within (query, turn, kind) cohorts.
pub fn agentic_advantages(group: &RolloutGroup, config: &CreditConfig) -> Result<AdvantageTable, CreditError> {
    group.check()?;
    let returns = turn_returns(group, config.gamma)?;
    let cells = cells(group);
    let keys: Vec<TurnKey> = cells
        .iter()
        .map(|(i, t)| TurnKey {
            query_id: group.query_id.clone(),
            turn_index: *t,
            action_kind: group.rollouts[*i].action_kinds[*t as usize - 1],
        })
        .collect();
    let values: Vec<f64> = cells.iter().map(|(i, t)| returns[*i][*t as usize - 1]).collect();
    let adv = standardize_by(&keys, &values, config);
    Ok(build_table(group, Estimator::Agentic, &cells, |n| {
        (values[n], adv[n], keys[n].cohort_id())
    }))
}

fn build_table(
    group: &RolloutGroup,
    estimator: Estimator,
    cells: &[(usize, u32)],
    row: impl Fn(usize) -> (f64, f64, String),
) -> AdvantageTable {
    let rows = cells
        .iter()
        .enumerate()
        .map(|(n, (i, t))| {
            let r = &group.rollouts[*i];
            let (r_tilde, advantage, cohort_id) = row(n);
            AdvantageRow {
                query_id: group.query_id.clone(),
                rollout_id: r.rollout_id.clone(),
                turn: *t,
                kind: r.action_kinds[*t as usize - 1],
                r_tilde,
                advantage,
                cohort_id,
                estimator,
            }
        })
        .collect();
    AdvantageTable { estimator, rows }
}

/// A_g broadcast to every turn of its rollout.
pub fn grpo_table(group: &RolloutGroup, config: &CreditConfig) -> Result<AdvantageTable, CreditError> {
    group.check()?;
    let terminal: Vec<f64> = group.rollouts.iter().map(|r| r.terminal_reward).collect();
    let a_g = grpo_advantages(&terminal, config);
    let cells = cells(group);
    Ok(build_table(group, Estimator::Grpo, &cells, |n| {
        let i = cells[n].0;
        (terminal[i], a_g[i], format!("{}/group", group.query_id))
    }))
}

/// The estimator variants layered on the group advantage.
pub fn variant_advantages(
    estimator: Estimator,
    group: &RolloutGroup,
    config: &CreditConfig,
) -> Result<AdvantageTable, CreditError> {
    group.check()?;
    let terminal: Vec<f64> = group.rollouts.iter().map(|r| r.terminal_reward).collect();
    let a_g = grpo_advantages(&terminal, config);
    let cells = cells(group);
    let q = &group.query_id;
    match estimator {
        Estimator::Grpo => grpo_table(group, config),
        Estimator::Agentic => agentic_advantages(group, config),
        Estimator::Tree => {
            let mut siblings: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, r) in group.rollouts.iter().enumerate() {
                let branch = r.branch.as_ref().ok_or_else(|| CreditError::MissingInput {
                    rollout: r.rollout_id.clone(),
                    what: "branch lineage",
                    estimator: "tree",
                })?;
                siblings.entry(branch.parent.as_str()).or_default().push(i);
            }
            let mut t_b = vec![0.0; group.rollouts.len()];
            for idx in siblings.values() {
                let vals: Vec<f64> = idx.iter().map(|i| terminal[*i]).collect();
                for (i, z) in idx.iter().zip(standardize(&vals, config.eps_num, config.eps_additive)) {
                    t_b[*i] = z;
                }
            }
            Ok(build_table(group, Estimator::Tree, &cells, |n| {
                let (i, t) = cells[n];
                let branch = group.rollouts[i].branch.as_ref().expect("checked above");
                if t < branch.branch_turn {
                    (terminal[i], a_g[i], format!("{q}/group"))
                } else {
                    (terminal[i], t_b[i], format!("{q}/sib/{}", branch.parent))
                }
            }))
        }
        Estimator::Mt => {
            let mut scores = Vec::with_capacity(cells.len());
            for (i, t) in &cells {
                let r = &group.rollouts[*i];
                scores.push(per_turn(r, r.turn_scores.as_ref(), "turn_scores", estimator)?[*t as usize - 1]);
            }
            let keys: Vec<u32> = cells.iter().map(|(_, t)| *t).collect();
            let b = standardize_by(&keys, &scores, config);
            Ok(build_table(group, Estimator::Mt, &cells, |n| {
                let i = cells[n].0;
                (
                    scores[n],
                    a_g[i] + config.rho_mix * b[n],
                    format!("{q}/t{}", cells[n].1),
                )
            }))
        }
        Estimator::Gigpo => {
            let mut keys = Vec::with_capacity(cells.len());
            let mut values = Vec::with_capacity(cells.len());
            for (i, t) in &cells {
                let r = &group.rollouts[*i];
                let anchors = r.anchor_keys.as_ref().ok_or_else(|| CreditError::MissingInput {
                    rollout: r.rollout_id.clone(),
                    what: "anchor_keys",
                    estimator: "gigpo",
                })?;
                keys.push(anchors[*t as usize - 1].clone());
                values.push(per_turn(r, r.anchor_values.as_ref(), "anchor_values", estimator)?[*t as usize - 1]);
            }
            let m = standardize_by(&keys, &values, config);
            Ok(build_table(group, Estimator::Gigpo, &cells, |n| {
                let i = cells[n].0;
                (
                    values[n],
                    a_g[i] + config.eta_mix * m[n],
                    format!("{q}/anchor/{}", keys[n]),
                )
            }))
        }
        Estimator::AgenticShaped => {
            let mut scores = Vec::with_capacity(cells.len());
            for (i, t) in &cells {
                let r = &group.rollouts[*i];
                let v = per_turn(r, r.progress.as_ref(), "progress", estimator)?[*t as usize - 1];
                let c = per_turn(r, r.delegation_cost.as_ref(), "delegation_cost", estimator)?[*t as usize - 1];
                let w = 1.0 / r.turns() as f64;
                scores.push(w * r.terminal_reward + config.gamma_progress * v - config.alpha_cost * c);
            }
            let keys: Vec<u32> = cells.iter().map(|(_, t)| *t).collect();
            let d = standardize_by(&keys, &scores, config);
            Ok(build_table(group, Estimator::AgenticShaped, &cells, |n| {
                let i = cells[n].0;
                (scores[n], a_g[i] + d[n], format!("{q}/t{}", cells[n].1))
            }))
        }
    }
}

/// Dispatches to the named estimator.
pub fn compute_advantages(
    estimator: Estimator,
    group: &RolloutGroup,
    config: &CreditConfig,
) -> Result<AdvantageTable, CreditError> {
    variant_advantages(estimator, group, config)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Kind of a token span in a rendered rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    /// Emitted by the policy during this (1-based) turn.
    Policy(u32),
    Observation,
    Template,
}

/// Policy-emitted token indices of one rollout and the turn of each.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    pub rollout_id: String,
    pub tokens: BTreeMap<usize, u32>,
}

impl TokenMask {
    /// Builds a mask from labelled half-open spans; only policy spans count.
    pub fn from_segments(rollout_id: &str, spans: &[(std::ops::Range<usize>, Segment)]) -> Result<Self, CreditError> {
        let mut seen = BTreeSet::new();
        let mut tokens = BTreeMap::new();
        for (range, seg) in spans {
            for index in range.clone() {
                if !seen.insert(index) {
                    return Err(CreditError::OverlappingMask { index });
                }
                if let Segment::Policy(turn) = seg {
                    tokens.insert(index, *turn);
                }
            }
        }
        Ok(Self {
            rollout_id: rollout_id.to_string(),
            tokens,
        })
    }
}

/// Dense per-token log-probabilities of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    pub eps_clip: f64,
    pub beta: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            eps_clip: 0.2,
            beta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenContribution {
    pub rollout_id: String,
    pub index: usize,
    pub ratio: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub policy_term: f64,
    pub kl_term: f64,
    pub total: f64,
    pub per_token: Vec<TokenContribution>,
}

/// −min(ρÂ, clip(ρ, 1−ε, 1+ε)Â) for one token.
pub fn clipped_contribution(ratio: f64, advantage: f64, eps_clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    -f64::min(ratio * advantage, clipped * advantage)
}

/// ρ − ln ρ − 1.
pub fn kl_estimate(ratio: f64) -> Result<f64, CreditError> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(CreditError::NonPositiveRatio(ratio));
    }
    Ok(ratio - ratio.ln() - 1.0)
}

/// Masked clipped surrogate plus β·KL. Only masked indices are read.
pub fn masked_clipped_loss(
    masks: &[TokenMask],
    logps: &[TokenLogProbs],
    advantages: &AdvantageTable,
    params: LossParams,
) -> Result<LossBreakdown, CreditError> {
    let mut policy_term = 0.0;
    let mut kl_term = 0.0;
    let mut per_token = Vec::new();
    for (mask, lp) in masks.iter().zip(logps) {
        for (&index, &turn) in &mask.tokens {
            let fetch = |v: &Vec<f64>| -> Result<f64, CreditError> {
                let x = *v.get(index).ok_or_else(|| CreditError::IndexOutOfRange {
                    rollout: mask.rollout_id.clone(),
                    index,
                })?;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(CreditError::NonFinite {
                        rollout: mask.rollout_id.clone(),
                        index,
                    })
                }
            };
            let (new, old, reference) = (fetch(&lp.logp_new)?, fetch(&lp.logp_old)?, fetch(&lp.logp_ref)?);
            let adv = advantages
                .get(&mask.rollout_id, turn)
                .ok_or_else(|| CreditError::MissingAdvantage {
                    rollout: mask.rollout_id.clone(),
                    turn,
                })?
                .advantage;
            let ratio = (new - old).exp();
            let contribution = clipped_contribution(ratio, adv, params.eps_clip);
            policy_term += contribution;
            kl_term += kl_estimate((reference - new).exp())?;
            per_token.push(TokenContribution {
                rollout_id: mask.rollout_id.clone(),
                index,
                ratio,
                contribution,
            });
        }
    }
    Ok(LossBreakdown {
        policy_term,
        kl_term,
        total: policy_term + params.beta * kl_term,
        per_token,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ActionKind::*;

    fn chain(id: &str, r: f64, shaping: Vec<f64>) -> Rollout {
        let kinds = vec![DecomposeRoute; shaping.len()];
        Rollout::chain(id, r, shaping, kinds)
    }

    fn group(rollouts: Vec<Rollout>) -> RolloutGroup {
        RolloutGroup {
            query_id: "q".into(),
            rollouts,
        }
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn turn_return_examples() {
        let g = group(vec![chain("a", 1.0, vec![0.0; 3])]);
        assert!(close(&turn_returns(&g, 1.0).unwrap()[0], &[1.0, 1.0, 1.0]));
        let g = group(vec![chain("a", 1.0, vec![0.0; 2])]);
        assert!(close(&turn_returns(&g, 0.5).unwrap()[0], &[0.5, 1.0]));
        let g = group(vec![chain("a", 1.0, vec![0.05, -0.05])]);
        assert!(close(&turn_returns(&g, 1.0).unwrap()[0], &[1.0, 0.95]));
        assert!(turn_returns(&g, 0.0).is_err());
        let mut bad = chain("a", 1.0, vec![0.0; 2]);
        bad.action_kinds.pop();
        assert!(matches!(
            turn_returns(&group(vec![bad]), 1.0),
            Err(CreditError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn grpo_examples() {
        let c = CreditConfig::default();
        assert!(close(
            &grpo_advantages(&[1.0, 1.0, 0.0, 0.0], &c),
            &[1.0, 1.0, -1.0, -1.0]
        ));
        assert!(close(&grpo_advantages(&[0.3; 4], &c), &[0.0; 4]));
        assert!(close(&grpo_advantages(&[1.0, 0.0], &c), &[1.0, -1.0]));
    }

    #[test]
    fn additive_epsilon_shrinks_scale() {
        let z = standardize(&[1.0, 0.0], 1e-8, true);
        assert!((z[0] - 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn agentic_examples() {
        let c = CreditConfig::default();
        let g = group(vec![chain("a", 1.0, vec![0.0]), chain("b", 0.0, vec![0.0])]);
        let t = agentic_advantages(&g, &c).unwrap();
        assert!(close(&t.advantages(), &[1.0, -1.0]));
        let g = group(vec![chain("a", 0.4, vec![0.01, 0.0]), chain("b", 0.4, vec![0.01, 0.0])]);
        assert!(agentic_advantages(&g, &c)
            .unwrap()
            .advantages()
            .iter()
            .all(|a| *a == 0.0));
    }

    #[test]
    fn kinds_split_cohorts() {
        let c = CreditConfig::default();
        let a = Rollout::chain("a", 1.0, vec![0.0], vec![DirectAnswer]);
        let b = Rollout::chain("b", 0.0, vec![0.0], vec![Final]);
        let t = agentic_advantages(&group(vec![a, b]), &c).unwrap();
        // each cohort is a singleton
        assert!(t.advantages().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn variant_examples() {
        let c = CreditConfig {
            rho_mix: 0.5,
            eta_mix: 0.3,
            ..CreditConfig::default()
        };
        // tree: sibling pair {1, 0}
        let mut a = chain("a", 1.0, vec![0.0; 2]);
        let mut b = chain("b", 0.0, vec![0.0; 2]);
        for r in [&mut a, &mut b] {
            r.branch = Some(Branch {
                parent: "p".into(),
                branch_turn: 2,
            });
        }
        let t = variant_advantages(Estimator::Tree, &group(vec![a, b]), &c).unwrap();
        assert!(close(
            &[t.get("a", 2).unwrap().advantage, t.get("b", 2).unwrap().advantage],
            &[1.0, -1.0]
        ));

        // mt: A_g = 0, U = {1, 0}
        let mut a = chain("a", 0.5, vec![0.0]);
        let mut b = chain("b", 0.5, vec![0.0]);
        a.turn_scores = Some(vec![1.0]);
        b.turn_scores = Some(vec![0.0]);
        let t = variant_advantages(Estimator::Mt, &group(vec![a, b]), &c).unwrap();
        assert!(close(&t.advantages(), &[0.5, -0.5]));

        // gigpo: A_g = 0.2 for both, anchor Q = {2, 0}
        let mut a = chain("a", 1.0, vec![0.0]);
        let mut b = chain("b", 1.0, vec![0.0]);
        for (r, q) in [(&mut a, 2.0), (&mut b, 0.0)] {
            r.anchor_keys = Some(vec!["s0".into()]);
            r.anchor_values = Some(vec![q]);
        }
        let mut t = variant_advantages(Estimator::Gigpo, &group(vec![a, b]), &c).unwrap();
        for row in &mut t.rows {
            // equal rewards give A_g = 0, so this adds the example's A_g = 0.2
            row.advantage += 0.2;
        }
        assert!(close(&t.advantages(), &[0.5, -0.1]));
    }

    #[test]
    fn variants_require_inputs() {
        let g = group(vec![chain("a", 1.0, vec![0.0]), chain("b", 0.0, vec![0.0])]);
        let c = CreditConfig::default();
        for e in [
            Estimator::Tree,
            Estimator::Mt,
            Estimator::Gigpo,
            Estimator::AgenticShaped,
        ] {
            assert!(matches!(
                variant_advantages(e, &g, &c),
                Err(CreditError::MissingInput { .. })
            ));
        }
        assert!(matches!(
            agentic_advantages(&group(vec![chain("a", 1.0, vec![0.0])]), &c),
            Err(CreditError::GroupTooSmall(_))
        ));
    }

    #[test]
    fn clip_examples() {
        assert!((clipped_contribution(2.0, 1.0, 0.2) + 1.2).abs() < 1e-12);
        assert!((clipped_contribution(0.5, -1.0, 0.2) - 0.8).abs() < 1e-12);
        assert!((clipped_contribution(1.0, 0.7, 0.2) + 0.7).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_estimate(1.0).unwrap(), 0.0);
        assert!((kl_estimate(2.0).unwrap() - 0.306853).abs() < 1e-6);
        assert!((kl_estimate(0.5).unwrap() - 0.193147).abs() < 1e-6);
        assert!(kl_estimate(0.0).is_err());
        assert!(kl_estimate(-1.0).is_err());
    }

    #[test]
    fn mask_excludes_observations() {
        let mask = TokenMask::from_segments(
            "a",
            &[
                (0..2, Segment::Template),
                (2..5, Segment::Policy(1)),
                (5..9, Segment::Observation),
                (9..11, Segment::Policy(2)),
            ],
        )
        .unwrap();
        assert_eq!(mask.tokens.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4, 9, 10]);
        assert!(TokenMask::from_segments("a", &[(0..3, Segment::Template), (2..4, Segment::Policy(1))]).is_err());
    }

    #[test]
    fn loss_errors() {
        let g = group(vec![chain("a", 1.0, vec![0.0]), chain("b", 0.0, vec![0.0])]);
        let table = agentic_advantages(&g, &CreditConfig::default()).unwrap();
        let mask = TokenMask {
            rollout_id: "a".into(),
            tokens: BTreeMap::from([(3, 1)]),
        };
        let short = TokenLogProbs {
            logp_new: vec![0.0; 2],
            logp_old: vec![0.0; 2],
            logp_ref: vec![0.0; 2],
        };
        assert!(matches!(
            masked_clipped_loss(std::slice::from_ref(&mask), &[short], &table, LossParams::default()),
            Err(CreditError::IndexOutOfRange { .. })
        ));
        let nan = TokenLogProbs {
            logp_new: vec![0.0, 0.0, 0.0, f64::NAN],
            logp_old: vec![0.0; 4],
            logp_ref: vec![0.0; 4],
        };
        assert!(matches!(
            masked_clipped_loss(&[mask], &[nan], &table, LossParams::default()),
            Err(CreditError::NonFinite { .. })
        ));
    }
}
