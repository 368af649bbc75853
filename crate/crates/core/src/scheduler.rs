//! Episode runner. Each turn asks the policy for an action, checks it against
//! the grammar and the pool, dispatches ready subtasks in parallel waves and
//! splices their observations back in ascending subtask order.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{
    write_obs, write_plan, write_query, write_route, write_verify, ObsBlock, PlanBlock, RouteBlock, TrajectoryDoc,
    TurnBlock, VerifyBlock,
};
use crate::pool::{anonymize_pool, pair_cost, AdmissiblePair, AnonymizedView, PoolRegistry, Usd};
use crate::reward::{CostEntry, CostLedger, ShapingEvent};
use crate::workers::{dispatch_call, mix_seed, RetryPolicy, WorkerBackend, WorkerRequest, WorkerResponse};

/// Replaces an elided body in the rendered router context.
pub const ELISION_MARKER: &str = "[elided]";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("dependency cycle among pending subtasks {0:?}")]
    CycleDetected(BTreeSet<u32>),
    #[error("context needs at least {needed} tokens, budget is {budget}")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error("invalid episode config: {0}")]
    Config(String),
    #[error("dispatch failed: {0}")]
    Dispatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    DirectAnswer,
    DecomposeRoute,
    Repair,
    Final,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::DirectAnswer => "direct_answer",
            ActionKind::DecomposeRoute => "decompose_route",
            ActionKind::Repair => "repair",
            ActionKind::Final => "final",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ActionKind::DirectAnswer | ActionKind::Final)
    }
}

/// One policy emission a_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAction {
    pub kind: ActionKind,
    pub plan: Option<PlanBlock>,
    pub routes: Vec<RouteBlock>,
    pub answer: Option<String>,
}

impl PolicyAction {
    pub fn direct_answer(answer: &str) -> Self {
        Self::terminal(ActionKind::DirectAnswer, answer)
    }

    pub fn final_answer(answer: &str) -> Self {
        Self::terminal(ActionKind::Final, answer)
    }

    fn terminal(kind: ActionKind, answer: &str) -> Self {
        Self {
            kind,
            plan: None,
            routes: Vec::new(),
            answer: Some(answer.to_string()),
        }
    }

    pub fn decompose(plan: PlanBlock, routes: Vec<RouteBlock>) -> Self {
        Self {
            kind: ActionKind::DecomposeRoute,
            plan: Some(plan),
            routes,
            answer: None,
        }
    }

    /// Continuation mode: a single route under an implicit singleton plan.
    pub fn continuation(route: RouteBlock) -> Self {
        Self {
            kind: ActionKind::DecomposeRoute,
            plan: None,
            routes: vec![route],
            answer: None,
        }
    }

    pub fn repair(plan: PlanBlock, routes: Vec<RouteBlock>) -> Self {
        Self {
            kind: ActionKind::Repair,
            ..Self::decompose(plan, routes)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyOutcome {
    Pass,
    RepairNeeded,
}

/// The policy's optional self-check after a turn's observations arrive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyNote {
    pub body: String,
    pub replan: bool,
}

/// A worker as the policy sees it under the blind protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerCard {
    pub label: String,
    pub skills: Vec<String>,
}

/// What the policy may condition on at one turn.
pub struct PolicyView<'a> {
    pub query: &'a str,
    pub turn: u32,
    pub t_max: u32,
    /// Rendered history, truncated to the context budget.
    pub context: &'a str,
    pub workers: &'a [WorkerCard],
    pub history: &'a [TurnRecord],
    /// Bodies of every resolved subtask so far.
    pub observations: &'a BTreeMap<u32, String>,
    pub next_subtask_id: u32,
    pub awaiting_repair: bool,
}

pub trait Policy: Send {
    fn act(&mut self, view: &PolicyView<'_>) -> PolicyAction;

    /// Called once a turn's observations are spliced. `None` emits no verify block.
    fn verify(&mut self, _view: &PolicyView<'_>, _observations: &[ObsBlock]) -> Option<VerifyNote> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    /// Route with `model` resolved to the real worker id.
    pub route: RouteBlock,
    pub worker_label: String,
    pub response: WorkerResponse,
    pub cost_usd: Usd,
    /// Router context tokens attributed to this dispatch.
    pub context_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: u32,
    pub action: PolicyAction,
    pub dispatches: Vec<Dispatch>,
    pub verify_outcome: Option<VerifyOutcome>,
    pub events: Vec<ShapingEvent>,
    /// Round of the emitted turn block; `None` for invalid or terminal actions.
    pub round: Option<u32>,
}

impl TurnRecord {
    pub fn is_valid(&self) -> bool {
        !self.events.contains(&ShapingEvent::InvalidEmission)
    }
}

/// Subtasks sent together: every member's dependencies were already resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchBatch {
    pub turn: u32,
    pub ready: BTreeSet<u32>,
    pub requests: Vec<WorkerRequest>,
}

/// Wall-clock span of one dispatch, relative to episode start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchTiming {
    pub turn: u32,
    pub subtask_id: u32,
    pub start: Duration,
    pub end: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub t_max: u32,
    /// Router context budget in whitespace tokens.
    pub context_budget: usize,
    pub call_timeout: Duration,
    pub retry: RetryPolicy,
    /// Shuffle worker labels per episode.
    pub blind: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            t_max: 8,
            context_budget: 4096,
            call_timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            blind: true,
        }
    }
}

/// Identity and randomness of one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub episode_id: String,
    pub seed: u64,
}

/// Live state of a running episode.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pub query: String,
    pub turn_index: u32,
    pub history: Vec<TurnRecord>,
    /// Declared subtasks without an observation yet, with their dependencies.
    pub pending: BTreeMap<u32, BTreeSet<u32>>,
    pub resolved: BTreeMap<u32, String>,
    pub ledger: CostLedger,
    pub anonym: AnonymizedView,
    pub context_budget: usize,
    turns: Vec<TurnBlock>,
    awaiting_repair: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub episode_id: String,
    pub final_answer: String,
    /// No final answer before T_max.
    pub truncated: bool,
    pub turns: Vec<TurnRecord>,
    pub ledger: CostLedger,
    pub context_tokens: u64,
    pub batches: Vec<DispatchBatch>,
    pub timings: Vec<DispatchTiming>,
    pub anonym: AnonymizedView,
}

impl EpisodeOutcome {
    pub fn dispatches(&self) -> impl Iterator<Item = (&TurnRecord, &Dispatch)> {
        self.turns.iter().flat_map(|t| t.dispatches.iter().map(move |d| (t, d)))
    }
}

/// Unresolved nodes of `pending` whose dependencies are all in `resolved`.
pub fn ready_set(
    pending: &BTreeMap<u32, BTreeSet<u32>>,
    resolved: &BTreeSet<u32>,
) -> Result<BTreeSet<u32>, SchedulerError> {
    let open: BTreeSet<u32> = pending.keys().filter(|id| !resolved.contains(id)).copied().collect();
    let ready: BTreeSet<u32> = open
        .iter()
        .filter(|id| pending[id].is_subset(resolved))
        .copied()
        .collect();
    if ready.is_empty() && !open.is_empty() {
        return Err(SchedulerError::CycleDetected(open));
    }
    Ok(ready)
}

/// Whitespace token count used for every context budget.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Elide {
    Obs(usize, usize),
    Payload(usize, usize),
    Verify(usize),
}

fn render_history(query: &str, turns: &[TurnBlock], elided: &BTreeSet<Elide>) -> String {
    let mut out = String::new();
    write_query(&mut out, query);
    for (ti, turn) in turns.iter().enumerate() {
        if let Some(plan) = &turn.plan {
            write_plan(&mut out, turn.round, plan);
        }
        for (ri, route) in turn.routes.iter().enumerate() {
            let payload = if elided.contains(&Elide::Payload(ti, ri)) {
                ELISION_MARKER
            } else {
                &route.payload
            };
            write_route(&mut out, route, payload);
        }
        for (oi, obs) in turn.observations.iter().enumerate() {
            let body = if elided.contains(&Elide::Obs(ti, oi)) {
                ELISION_MARKER
            } else {
                &obs.body
            };
            write_obs(&mut out, obs.subtask_id, body);
        }
        if let Some(v) = &turn.verify {
            let body = if elided.contains(&Elide::Verify(ti)) {
                ELISION_MARKER
            } else {
                &v.body
            };
            write_verify(&mut out, body, v.replan);
        }
    }
    out
}

impl PartialOrd for Elide {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Elide {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let key = |e: &Elide| match *e {
            Elide::Obs(t, i) => (0, t, i),
            Elide::Payload(t, i) => (1, t, i),
            Elide::Verify(t) => (2, t, 0),
        };
        key(self).cmp(&key(other))
    }
}

/// Renders the router context within `budget` whitespace tokens.
///
/// Older observation bodies are elided first, then older route payloads and
/// verify notes. The query, every plan and the latest turn are always kept.
pub fn truncate_context(query: &str, turns: &[TurnBlock], budget: usize) -> Result<String, SchedulerError> {
    if budget == 0 {
        return Err(SchedulerError::BudgetTooSmall { needed: 1, budget });
    }
    let mut elided = BTreeSet::new();
    let mut text = render_history(query, turns, &elided);
    if count_tokens(&text) <= budget {
        return Ok(text);
    }
    let older = turns.len().saturating_sub(1);
    let mut candidates = Vec::new();
    for (ti, turn) in turns[..older].iter().enumerate() {
        candidates.extend((0..turn.observations.len()).map(|oi| Elide::Obs(ti, oi)));
    }
    for (ti, turn) in turns[..older].iter().enumerate() {
        candidates.extend((0..turn.routes.len()).map(|ri| Elide::Payload(ti, ri)));
        if turn.verify.is_some() {
            candidates.push(Elide::Verify(ti));
        }
    }
    for cand in candidates {
        elided.insert(cand);
        text = render_history(query, turns, &elided);
        if count_tokens(&text) <= budget {
            return Ok(text);
        }
    }
    Err(SchedulerError::BudgetTooSmall {
        needed: count_tokens(&text),
        budget,
    })
}

/// Like [`truncate_context`], but when even the skeleton is too large keeps
/// only its trailing `budget` tokens so an episode can continue.
fn policy_context(query: &str, turns: &[TurnBlock], budget: usize) -> String {
    match truncate_context(query, turns, budget) {
        Ok(text) => text,
        Err(_) => {
            let full: BTreeSet<Elide> = turns
                .iter()
                .enumerate()
                .take(turns.len().saturating_sub(1))
                .flat_map(|(ti, t)| {
                    (0..t.observations.len())
                        .map(move |oi| Elide::Obs(ti, oi))
                        .chain((0..t.routes.len()).map(move |ri| Elide::Payload(ti, ri)))
                        .chain(std::iter::once(Elide::Verify(ti)))
                })
                .collect();
            let text = render_history(query, turns, &full);
            let tokens: Vec<&str> = text.split_whitespace().collect();
            tokens[tokens.len().saturating_sub(budget)..].join(" ")
        }
    }
}

/// Re-derives the action kind of every emitted turn plus the closing action.
pub fn derive_action_kinds(doc: &TrajectoryDoc) -> Vec<ActionKind> {
    let mut kinds = Vec::with_capacity(doc.turns.len() + 1);
    let mut replan = false;
    for turn in &doc.turns {
        kinds.push(if replan && turn.plan.is_some() {
            ActionKind::Repair
        } else {
            ActionKind::DecomposeRoute
        });
        replan = turn.verify.as_ref().is_some_and(|v| v.replan);
    }
    kinds.push(if doc.turns.is_empty() {
        ActionKind::DirectAnswer
    } else {
        ActionKind::Final
    });
    kinds
}

struct ResolvedRoute {
    route: RouteBlock,
    label: String,
    deps: BTreeSet<u32>,
}

impl EpisodeState {
    fn new(query: &str, anonym: AnonymizedView, context_budget: usize) -> Self {
        Self {
            query: query.to_string(),
            turn_index: 0,
            history: Vec::new(),
            pending: BTreeMap::new(),
            resolved: BTreeMap::new(),
            ledger: CostLedger::default(),
            anonym,
            context_budget,
            turns: Vec::new(),
            awaiting_repair: false,
        }
    }

    fn declared(&self, id: u32) -> bool {
        self.pending.contains_key(&id) || self.resolved.contains_key(&id)
    }

    pub fn next_subtask_id(&self) -> u32 {
        let max_pending = self.pending.keys().next_back().copied().unwrap_or(0);
        let max_resolved = self.resolved.keys().next_back().copied().unwrap_or(0);
        max_pending.max(max_resolved) + 1
    }

    pub fn emitted_turns(&self) -> &[TurnBlock] {
        &self.turns
    }

    fn resolve_model(&self, registry: &PoolRegistry, name: &str) -> Option<(String, String)> {
        if let Some(worker) = self.anonym.worker_of(name) {
            return Some((worker.to_string(), name.to_string()));
        }
        registry.worker(name).map(|w| {
            (
                w.worker_id.clone(),
                self.anonym.label_of(name).unwrap_or_else(|| name.to_string()),
            )
        })
    }

    /// Checks an emission and resolves its routes, or says why it is invalid.
    fn check_action(&self, registry: &PoolRegistry, action: &PolicyAction) -> Result<Vec<ResolvedRoute>, String> {
        match action.kind {
            ActionKind::DirectAnswer | ActionKind::Final => {
                if action.answer.is_none() {
                    return Err("terminal action without an answer".into());
                }
                if action.plan.is_some() || !action.routes.is_empty() {
                    return Err("terminal action carries a plan or routes".into());
                }
                if action.kind == ActionKind::DirectAnswer && !self.turns.is_empty() {
                    return Err("direct answer after dispatch turns; use final".into());
                }
                if action.kind == ActionKind::Final && self.turns.is_empty() {
                    return Err("final without any dispatch turn; use direct_answer".into());
                }
                return Ok(Vec::new());
            }
            ActionKind::Repair if !self.awaiting_repair => {
                return Err("repair without a preceding failed verify".into());
            }
            ActionKind::Repair if action.plan.is_none() => {
                return Err("repair must carry a new plan".into());
            }
            _ => {}
        }
        if action.answer.is_some() {
            return Err("routing action carries an answer".into());
        }
        if action.routes.is_empty() {
            return Err("routing action without routes".into());
        }

        let mut deps_of: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        match &action.plan {
            Some(plan) => {
                if plan.subtasks.is_empty() {
                    return Err("empty plan".into());
                }
                for sub in &plan.subtasks {
                    if sub.id == 0 || self.declared(sub.id) || deps_of.contains_key(&sub.id) {
                        return Err(format!("subtask id {} is zero or already declared", sub.id));
                    }
                    if let Some(dep) = sub.depends_on.iter().find(|d| **d >= sub.id) {
                        return Err(format!("subtask {} depends on {dep}, which is not smaller", sub.id));
                    }
                    if let Some(dep) = sub
                        .depends_on
                        .iter()
                        .find(|d| !self.declared(**d) && !deps_of.contains_key(d))
                    {
                        return Err(format!("subtask {} depends on undeclared {dep}", sub.id));
                    }
                    deps_of.insert(sub.id, sub.depends_on.clone());
                }
            }
            None => {
                if action.routes.len() != 1 {
                    return Err("plan-less turn must carry exactly one route".into());
                }
                let id = action.routes[0].subtask_id;
                if id == 0 || self.declared(id) {
                    return Err(format!("subtask id {id} is zero or already declared"));
                }
                deps_of.insert(id, BTreeSet::new());
            }
        }

        let routed: BTreeSet<u32> = action.routes.iter().map(|r| r.subtask_id).collect();
        if routed.len() != action.routes.len() {
            return Err("a subtask is routed twice".into());
        }
        let mut out = Vec::with_capacity(action.routes.len());
        for route in &action.routes {
            if !route.nested.is_empty() {
                return Err(format!("route {} nests other routes", route.subtask_id));
            }
            let Some(deps) = deps_of.get(&route.subtask_id) else {
                return Err(format!("route targets undeclared subtask {}", route.subtask_id));
            };
            if let Some(dep) = deps
                .iter()
                .find(|d| !self.resolved.contains_key(d) && !routed.contains(d))
            {
                return Err(format!(
                    "subtask {} waits on {dep}, which is neither resolved nor routed",
                    route.subtask_id
                ));
            }
            let Some((worker_id, label)) = self.resolve_model(registry, &route.model) else {
                return Err(format!("unknown model `{}`", route.model));
            };
            if let Some(problem) = registry.vocabulary_problem(&worker_id, &route.skill) {
                return Err(problem);
            }
            out.push(ResolvedRoute {
                route: RouteBlock::new(route.subtask_id, &worker_id, &route.skill, &route.payload),
                label,
                deps: deps.clone(),
            });
        }
        Ok(out)
    }
}

fn worker_cards(registry: &PoolRegistry, anonym: &AnonymizedView) -> Vec<WorkerCard> {
    anonym
        .entries()
        .map(|(label, id)| WorkerCard {
            label,
            skills: registry
                .worker(id)
                .map(|w| w.skills.iter().cloned().collect())
                .unwrap_or_default(),
        })
        .collect()
}

fn dependency_context(deps: &BTreeSet<u32>, resolved: &BTreeMap<u32, String>) -> String {
    deps.iter()
        .filter_map(|d| resolved.get(d).map(|body| format!("[subtask {d}] {body}")))
        .collect::<Vec<_>>()
        .join("\n")
}

fn observation_body(resp: &WorkerResponse) -> String {
    if resp.is_ok() {
        resp.observation.clone()
    } else {
        format!("[error: {}]", resp.status.as_str())
    }
}

/// Runs one episode to a final answer or to T_max.
pub async fn run_episode(
    query: &str,
    policy: &mut dyn Policy,
    registry: &PoolRegistry,
    backend: &dyn WorkerBackend,
    config: &EpisodeConfig,
    spec: &EpisodeSpec,
) -> Result<(TrajectoryDoc, EpisodeOutcome), SchedulerError> {
    if config.t_max == 0 {
        return Err(SchedulerError::Config("t_max must be at least 1".into()));
    }
    if config.context_budget == 0 {
        return Err(SchedulerError::Config("context budget must be positive".into()));
    }
    let anonym = if config.blind {
        anonymize_pool(registry, spec.seed)
    } else {
        AnonymizedView::identity(registry)
    };
    let cards = worker_cards(registry, &anonym);
    let mut state = EpisodeState::new(query, anonym, config.context_budget);
    let mut batches = Vec::new();
    let mut timings = Vec::new();
    let mut context_tokens = 0u64;
    let mut last_context_tokens = 0u64;
    let mut final_answer = None;
    let clock = Instant::now();

    while state.turn_index < config.t_max {
        state.turn_index += 1;
        let turn = state.turn_index;
        let labelled: Vec<TurnBlock> = state
            .turns
            .iter()
            .map(|t| {
                let mut t = t.clone();
                for r in &mut t.routes {
                    if let Some(label) = state.anonym.label_of(&r.model) {
                        r.model = label;
                    }
                }
                t
            })
            .collect();
        let context = policy_context(query, &labelled, config.context_budget);
        let turn_context_tokens = count_tokens(&context) as u64;
        last_context_tokens = turn_context_tokens;

        let action = {
            let view = PolicyView {
                query,
                turn,
                t_max: config.t_max,
                context: &context,
                workers: &cards,
                history: &state.history,
                observations: &state.resolved,
                next_subtask_id: state.next_subtask_id(),
                awaiting_repair: state.awaiting_repair,
            };
            policy.act(&view)
        };

        let routes = match state.check_action(registry, &action) {
            Ok(routes) => routes,
            Err(_) => {
                state.history.push(TurnRecord {
                    turn,
                    action,
                    dispatches: Vec::new(),
                    verify_outcome: None,
                    events: vec![ShapingEvent::InvalidEmission],
                    round: None,
                });
                continue;
            }
        };

        if action.kind.is_terminal() {
            let events = if state.pending.is_empty() {
                Vec::new()
            } else {
                vec![ShapingEvent::PrematureFinal]
            };
            final_answer = action.answer.clone();
            state.history.push(TurnRecord {
                turn,
                action,
                dispatches: Vec::new(),
                verify_outcome: None,
                events,
                round: None,
            });
            break;
        }

        let mut events = Vec::new();
        if action.plan.is_some() {
            events.push(ShapingEvent::SchemaValidPlan);
        }
        events.push(ShapingEvent::SchemaValidRoutes);
        if action.kind == ActionKind::Repair {
            events.push(ShapingEvent::RepairTriggered);
        }
        state.awaiting_repair = false;

        match &action.plan {
            Some(plan) => {
                for sub in &plan.subtasks {
                    state.pending.insert(sub.id, sub.depends_on.clone());
                }
            }
            None => {
                state.pending.insert(routes[0].route.subtask_id, BTreeSet::new());
            }
        }

        let round = state.turns.len() as u32 + 1;
        let by_id: BTreeMap<u32, &ResolvedRoute> = routes.iter().map(|r| (r.route.subtask_id, r)).collect();
        let turn_dag: BTreeMap<u32, BTreeSet<u32>> = routes
            .iter()
            .map(|r| {
                let local: BTreeSet<u32> = r.deps.iter().filter(|d| by_id.contains_key(d)).copied().collect();
                (r.route.subtask_id, local)
            })
            .collect();
        let mut done: BTreeSet<u32> = BTreeSet::new();
        let mut dispatches = Vec::new();
        let mut observations = Vec::new();

        while done.len() < turn_dag.len() {
            let ready = ready_set(&turn_dag, &done)?;
            let requests: Vec<WorkerRequest> = ready
                .iter()
                .map(|id| {
                    let r = by_id[id];
                    WorkerRequest {
                        pair: AdmissiblePair::new(&r.route.model, &r.route.skill),
                        instruction: r.route.payload.clone(),
                        context: dependency_context(&r.deps, &state.resolved),
                        timeout: config.call_timeout,
                        attempt_seed: mix_seed(&[&spec.seed.to_le_bytes(), &turn.to_le_bytes(), &id.to_le_bytes()]),
                    }
                })
                .collect();
            let calls = requests.iter().map(|req| async move {
                let start = clock.elapsed();
                let resp = dispatch_call(registry, backend, req, config.retry).await;
                (start, clock.elapsed(), resp)
            });
            let results = join_all(calls).await;
            for ((id, req), (start, end, resp)) in ready.iter().zip(&requests).zip(results) {
                let resp = resp.map_err(|e| SchedulerError::Dispatch(e.to_string()))?;
                let cost =
                    pair_cost(registry, &req.pair, &resp.usage).map_err(|e| SchedulerError::Dispatch(e.to_string()))?;
                let r = by_id[id];
                state.ledger.push(CostEntry {
                    turn,
                    subtask_id: *id,
                    pair: req.pair.clone(),
                    usage: resp.usage,
                    cost_usd: cost,
                });
                timings.push(DispatchTiming {
                    turn,
                    subtask_id: *id,
                    start,
                    end,
                });
                let body = observation_body(&resp);
                state.pending.remove(id);
                state.resolved.insert(*id, body.clone());
                observations.push(ObsBlock { subtask_id: *id, body });
                context_tokens += turn_context_tokens;
                dispatches.push(Dispatch {
                    route: r.route.clone(),
                    worker_label: r.label.clone(),
                    response: resp,
                    cost_usd: cost,
                    context_tokens: turn_context_tokens,
                });
                done.insert(*id);
            }
            batches.push(DispatchBatch { turn, ready, requests });
        }

        let note = {
            let view = PolicyView {
                query,
                turn,
                t_max: config.t_max,
                context: &context,
                workers: &cards,
                history: &state.history,
                observations: &state.resolved,
                next_subtask_id: state.next_subtask_id(),
                awaiting_repair: false,
            };
            policy.verify(&view, &observations)
        };
        let verify_outcome = note.as_ref().map(|n| {
            if n.replan {
                VerifyOutcome::RepairNeeded
            } else {
                VerifyOutcome::Pass
            }
        });
        state.awaiting_repair = verify_outcome == Some(VerifyOutcome::RepairNeeded);

        state.turns.push(TurnBlock {
            round,
            plan: action.plan.clone(),
            routes: routes.iter().map(|r| r.route.clone()).collect(),
            observations,
            verify: note.map(|n| VerifyBlock {
                body: n.body,
                replan: n.replan,
            }),
        });
        state.history.push(TurnRecord {
            turn,
            action,
            dispatches,
            verify_outcome,
            events,
            round: Some(round),
        });
    }

    if context_tokens == 0 {
        context_tokens = last_context_tokens;
    }
    let truncated = final_answer.is_none();
    let final_answer = final_answer.unwrap_or_default();
    let doc = TrajectoryDoc {
        query: query.to_string(),
        turns: state.turns,
        final_answers: vec![final_answer.clone()],
    };
    let outcome = EpisodeOutcome {
        episode_id: spec.episode_id.clone(),
        final_answer,
        truncated,
        turns: state.history,
        ledger: state.ledger,
        context_tokens,
        batches,
        timings,
        anonym: state.anonym,
    };
    Ok((doc, outcome))
}
