//! Shared generators, fixtures and oracles for the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use orchestra::curriculum::{CurriculumManifest, DistillationPass, ProbeResult, RetryResult, TaskRecord};
use orchestra::grammar::{ObsBlock, PlanBlock, RouteBlock, Subtask, TrajectoryDoc, TurnBlock, VerifyBlock};
use orchestra::harness::{builtin_policy, run_batch, BatchConfig, BatchOutput, Grouping};
use orchestra::pool::{load_registry, PoolRegistry};
use orchestra::scheduler::{run_episode, EpisodeConfig, EpisodeOutcome, EpisodeSpec, Policy, PolicyAction, PolicyView};
use orchestra::workers::{BackendRouter, RetryPolicy, WorkerBackend};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn fixture_pool() -> PoolRegistry {
    let text = std::fs::read_to_string(fixtures().join("pool.json")).unwrap();
    load_registry(&text).unwrap()
}

pub fn demo_tasks() -> Vec<TaskRecord> {
    orchestra::harness::load_tasks(&fixtures().join("demo/tasks.jsonl")).unwrap()
}

/// `n` tasks cycled from the demo set with distinct ids.
pub fn batch_tasks(n: usize) -> Vec<TaskRecord> {
    let demo = demo_tasks();
    (0..n)
        .map(|i| {
            let mut t = demo[i % demo.len()].clone();
            t.task_id = format!("{}-{:02}", t.task_id, i);
            t
        })
        .collect()
}

/// One scripted worker `w` over a single primitive, optionally sleeping.
pub fn single_worker_pool(latency_ms: u64, sleep: bool) -> PoolRegistry {
    let src = format!(
        r#"{{"primitives":[{{"primitive_id":"direct_answer","cluster":"answer_reason"}}],
            "workers":[{{"worker_id":"w","prompt_price":1,"completion_price":2,"skills":["direct_answer"],
              "scripted":{{"default_row":{{"correct":"ok","wrong":"no"}},
                           "token_profile":{{"prompt_tokens":10,"completion_tokens":5}},
                           "latency_ms":{latency_ms},"sleep":{sleep}}}}}]}}"#
    );
    load_registry(&src).unwrap()
}

// ---------------------------------------------------------------------------
// Trajectory generation
// ---------------------------------------------------------------------------

const ALPHABET: &[char] = &[
    'a', 'b', 'c', 'x', 'y', 'z', 'Q', '0', '7', '+', '=', '?', '<', '>', '&', '"', '\'', ';', ' ', 'é',
];

/// Non-empty text with markup-significant characters and no edge whitespace.
pub fn text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..16);
    let s: String = (0..len).map(|_| *ALPHABET.choose(rng).unwrap()).collect();
    let t = s.trim().to_string();
    if t.is_empty() {
        "t".into()
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Lazy,
    Oneshot,
    Continuation,
    Repair,
}

/// Builds grammar-valid documents whose routes are admissible in `pairs`.
pub struct DocGen {
    pairs: Vec<(String, String)>,
}

impl DocGen {
    pub fn new(registry: &PoolRegistry) -> Self {
        let pairs = registry
            .admissible_pairs()
            .into_iter()
            .map(|p| (p.worker_id, p.primitive_id))
            .collect();
        Self { pairs }
    }

    fn route(&self, rng: &mut ChaCha8Rng, id: u32) -> RouteBlock {
        let (m, s) = self.pairs.choose(rng).unwrap();
        RouteBlock::new(id, m, s, &text(rng))
    }

    fn planned_turn(
        &self,
        rng: &mut ChaCha8Rng,
        round: u32,
        next_id: &mut u32,
        verify: Option<VerifyBlock>,
    ) -> TurnBlock {
        let first = *next_id;
        let k = rng.random_range(1..=4);
        let mut subtasks = Vec::new();
        for id in first..first + k {
            let depends_on: BTreeSet<u32> = (1..id).filter(|_| rng.random_bool(0.3)).collect();
            subtasks.push(Subtask {
                id,
                depends_on,
                description: text(rng),
            });
        }
        *next_id += k;
        let routes = subtasks.iter().map(|s| self.route(rng, s.id)).collect();
        let observations = subtasks
            .iter()
            .map(|s| ObsBlock {
                subtask_id: s.id,
                body: text(rng),
            })
            .collect();
        TurnBlock {
            round,
            plan: Some(PlanBlock { subtasks }),
            routes,
            observations,
            verify,
        }
    }

    fn planless_turn(&self, rng: &mut ChaCha8Rng, round: u32, next_id: &mut u32) -> TurnBlock {
        let id = *next_id;
        *next_id += 1;
        TurnBlock {
            round,
            plan: None,
            routes: vec![self.route(rng, id)],
            observations: vec![ObsBlock {
                subtask_id: id,
                body: text(rng),
            }],
            verify: None,
        }
    }

    fn plain_verify(rng: &mut ChaCha8Rng) -> Option<VerifyBlock> {
        rng.random_bool(0.5).then(|| VerifyBlock {
            body: text(rng),
            replan: false,
        })
    }

    pub fn doc_of(&self, rng: &mut ChaCha8Rng, shape: Shape) -> TrajectoryDoc {
        let mut turns = Vec::new();
        let mut next_id = 1;
        match shape {
            Shape::Lazy => {}
            Shape::Oneshot => {
                let v = Self::plain_verify(rng);
                turns.push(self.planned_turn(rng, 1, &mut next_id, v));
            }
            Shape::Continuation => {
                let n = rng.random_range(2..=4);
                let mut round = 0;
                for _ in 0..n {
                    if rng.random_bool(0.5) {
                        round += rng.random_range(1..=2);
                        let v = Self::plain_verify(rng);
                        turns.push(self.planned_turn(rng, round, &mut next_id, v));
                    } else {
                        round += 1;
                        turns.push(self.planless_turn(rng, round, &mut next_id));
                    }
                }
            }
            Shape::Repair => {
                let n = rng.random_range(2..=3);
                for r in 1..=n {
                    let v = VerifyBlock {
                        body: text(rng),
                        replan: r < n,
                    };
                    turns.push(self.planned_turn(rng, r, &mut next_id, Some(v)));
                }
            }
        }
        TrajectoryDoc {
            query: text(rng),
            turns,
            final_answers: vec![text(rng)],
        }
    }

    pub fn doc(&self, rng: &mut ChaCha8Rng) -> TrajectoryDoc {
        let shape = *[Shape::Lazy, Shape::Oneshot, Shape::Continuation, Shape::Repair]
            .choose(rng)
            .unwrap();
        self.doc_of(rng, shape)
    }

    /// A document with at least two planned turns, for round tampering.
    pub fn multi_plan_doc(&self, rng: &mut ChaCha8Rng) -> TrajectoryDoc {
        let mut next_id = 1;
        let n = rng.random_range(2..=3);
        let turns = (1..=n)
            .map(|r| {
                let v = Self::plain_verify(rng);
                self.planned_turn(rng, r, &mut next_id, v)
            })
            .collect();
        TrajectoryDoc {
            query: text(rng),
            turns,
            final_answers: vec![text(rng)],
        }
    }
}

/// The five grammar constraints, each broken in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Breakage {
    SingleFinalAnswer,
    MonotoneRounds,
    DagAcyclic,
    ClosedVocabulary,
    NoNestedRoute,
}

impl Breakage {
    pub const ALL: [Breakage; 5] = [
        Breakage::SingleFinalAnswer,
        Breakage::MonotoneRounds,
        Breakage::DagAcyclic,
        Breakage::ClosedVocabulary,
        Breakage::NoNestedRoute,
    ];
}

/// Raw text violating exactly one constraint. Nested routes only survive
/// the lenient parser, so callers parse with that.
pub fn broken_raw(gen: &DocGen, rng: &mut ChaCha8Rng, kind: Breakage) -> String {
    use orchestra::grammar::serialize_trajectory;
    match kind {
        Breakage::SingleFinalAnswer => {
            let doc = gen.doc(rng);
            let raw = serialize_trajectory(&doc).unwrap();
            if rng.random_bool(0.5) {
                raw.replace("</trajectory>", "<final_answer>again</final_answer>\n</trajectory>")
            } else {
                let start = raw.find("<final_answer>").unwrap();
                let end = raw.find("</final_answer>").unwrap() + "</final_answer>\n".len();
                format!("{}{}", &raw[..start], &raw[end..])
            }
        }
        Breakage::MonotoneRounds => {
            let mut doc = gen.multi_plan_doc(rng);
            let i = rng.random_range(1..doc.turns.len());
            let prev = doc.turns[i - 1].round;
            doc.turns[i].round = rng.random_range(1..=prev);
            for later in i + 1..doc.turns.len() {
                doc.turns[later].round = doc.turns[later - 1].round + 1;
            }
            write_unchecked(&doc)
        }
        Breakage::DagAcyclic => {
            let mut doc = gen.doc_of(rng, Shape::Oneshot);
            let plan = doc.turns[0].plan.as_mut().unwrap();
            let n = plan.subtasks.len();
            let i = rng.random_range(0..n);
            let id = plan.subtasks[i].id;
            // self-loop or a forward edge to a declared subtask
            let target = plan.subtasks[rng.random_range(i..n)].id;
            plan.subtasks[i].depends_on.insert(target.max(id));
            write_unchecked(&doc)
        }
        Breakage::ClosedVocabulary => {
            let mut doc = gen.doc_of(rng, Shape::Oneshot);
            let routes = &mut doc.turns[0].routes;
            let i = rng.random_range(0..routes.len());
            if rng.random_bool(0.5) {
                routes[i].model = "no-such-model".into();
            } else {
                routes[i].skill = "no_such_skill".into();
            }
            write_unchecked(&doc)
        }
        Breakage::NoNestedRoute => {
            let doc = gen.doc_of(rng, Shape::Oneshot);
            let raw = serialize_trajectory(&doc).unwrap();
            let r = &doc.turns[0].routes[0];
            let open = raw.find("<route ").unwrap();
            let close = open + raw[open..].find("</route>").unwrap();
            let nested = format!(
                r#"<route subtask="{}" model="{}" skill="{}">inner</route>"#,
                r.subtask_id, r.model, r.skill
            );
            format!("{}{}{}", &raw[..close], nested, &raw[close..])
        }
    }
}

/// Serializes without the validity check by round-tripping through a valid
/// stand-in: only round attributes and edges differ, so build by hand.
pub fn write_unchecked(doc: &TrajectoryDoc) -> String {
    let esc = |s: &str| {
        s.replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;")
            .replace('"', "&quot;")
    };
    let mut out = format!("<trajectory>\n<query>{}</query>\n", esc(&doc.query));
    for turn in &doc.turns {
        if let Some(plan) = &turn.plan {
            out.push_str(&format!("<plan round=\"{}\">\n", turn.round));
            for s in &plan.subtasks {
                let deps: Vec<String> = s.depends_on.iter().map(u32::to_string).collect();
                out.push_str(&format!(
                    "<subtask id=\"{}\" depends_on=\"{}\">{}</subtask>\n",
                    s.id,
                    deps.join(","),
                    esc(&s.description)
                ));
            }
            out.push_str("</plan>\n");
        }
        for r in &turn.routes {
            out.push_str(&format!(
                "<route subtask=\"{}\" model=\"{}\" skill=\"{}\">{}</route>\n",
                r.subtask_id,
                esc(&r.model),
                esc(&r.skill),
                esc(&r.payload)
            ));
        }
        for o in &turn.observations {
            out.push_str(&format!("<obs subtask=\"{}\">{}</obs>\n", o.subtask_id, esc(&o.body)));
        }
        if let Some(v) = &turn.verify {
            out.push_str(&format!(
                "<verify>{}{}</verify>\n",
                esc(&v.body),
                if v.replan { "<replan/>" } else { "" }
            ));
        }
    }
    for a in &doc.final_answers {
        out.push_str(&format!("<final_answer>{}</final_answer>\n", esc(a)));
    }
    out.push_str("</trajectory>\n");
    out
}

// ---------------------------------------------------------------------------
// DAGs and the scheduler
// ---------------------------------------------------------------------------

/// Every DAG on nodes 1..=n whose edges point from smaller to larger ids.
/// Any DAG is isomorphic to one of these, so this covers all shapes.
pub fn all_dags(n: u32) -> Vec<BTreeMap<u32, BTreeSet<u32>>> {
    let pairs: Vec<(u32, u32)> = (1..=n).flat_map(|j| (1..j).map(move |i| (i, j))).collect();
    (0u64..1 << pairs.len())
        .map(|mask| {
            let mut deps: BTreeMap<u32, BTreeSet<u32>> = (1..=n).map(|i| (i, BTreeSet::new())).collect();
            for (bit, (i, j)) in pairs.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    deps.get_mut(j).unwrap().insert(*i);
                }
            }
            deps
        })
        .collect()
}

/// Emits one plan covering the whole DAG, then a final answer.
pub struct PlanPolicy {
    pub deps: BTreeMap<u32, BTreeSet<u32>>,
    sent: bool,
}

impl PlanPolicy {
    pub fn new(deps: BTreeMap<u32, BTreeSet<u32>>) -> Self {
        Self { deps, sent: false }
    }
}

impl Policy for PlanPolicy {
    fn act(&mut self, view: &PolicyView<'_>) -> PolicyAction {
        if self.sent {
            return PolicyAction::final_answer("done");
        }
        self.sent = true;
        let card = &view.workers[0];
        let skill = &card.skills[0];
        let subtasks = self
            .deps
            .iter()
            .map(|(id, deps)| Subtask {
                id: *id,
                depends_on: deps.clone(),
                description: format!("node {id}"),
            })
            .collect();
        let routes = self
            .deps
            .keys()
            .map(|id| RouteBlock::new(*id, &card.label, skill, &format!("node {id}")))
            .collect();
        PolicyAction::decompose(PlanBlock { subtasks }, routes)
    }
}

/// Independent check of one episode's dispatch record against the DAG:
/// batches must equal the Kahn layers computed with petgraph, and each node
/// must start only after all of its dependencies ended.
pub fn check_dispatch(deps: &BTreeMap<u32, BTreeSet<u32>>, outcome: &EpisodeOutcome) -> Result<(), String> {
    use petgraph::graph::DiGraph;
    use petgraph::Direction;

    let mut g = DiGraph::<u32, ()>::new();
    let idx: BTreeMap<u32, _> = deps.keys().map(|id| (*id, g.add_node(*id))).collect();
    for (id, ds) in deps {
        for d in ds {
            g.add_edge(idx[d], idx[id], ());
        }
    }
    let order = petgraph::algo::toposort(&g, None).map_err(|_| "oracle graph has a cycle".to_string())?;
    if order.len() != deps.len() {
        return Err("toposort lost nodes".into());
    }

    let mut indeg: BTreeMap<u32, usize> = deps.iter().map(|(id, ds)| (*id, ds.len())).collect();
    let mut layers: Vec<BTreeSet<u32>> = Vec::new();
    while !indeg.is_empty() {
        let layer: BTreeSet<u32> = indeg.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        for id in &layer {
            indeg.remove(id);
            for next in g.neighbors_directed(idx[id], Direction::Outgoing) {
                *indeg.get_mut(&g[next]).unwrap() -= 1;
            }
        }
        layers.push(layer);
    }
    let batches: Vec<BTreeSet<u32>> = outcome.batches.iter().map(|b| b.ready.clone()).collect();
    if batches != layers {
        return Err(format!("batches {batches:?} differ from layers {layers:?}"));
    }

    let timing: BTreeMap<u32, (Duration, Duration)> = outcome
        .timings
        .iter()
        .map(|t| (t.subtask_id, (t.start, t.end)))
        .collect();
    if timing.len() != deps.len() {
        return Err(format!("{} of {} nodes dispatched", timing.len(), deps.len()));
    }
    let position: BTreeMap<u32, usize> = outcome
        .timings
        .iter()
        .enumerate()
        .map(|(i, t)| (t.subtask_id, i))
        .collect();
    for (id, ds) in deps {
        for d in ds {
            if position[d] >= position[id] {
                return Err(format!("{id} dispatched before its dependency {d}"));
            }
            if timing[d].1 > timing[id].0 {
                return Err(format!("{id} started before {d} finished"));
            }
        }
    }
    Ok(())
}

/// True when every batch of two or more nodes ran with a common instant.
pub fn frontiers_overlap(outcome: &EpisodeOutcome) -> bool {
    outcome.batches.iter().all(|batch| {
        if batch.ready.len() < 2 {
            return true;
        }
        let spans: Vec<_> = outcome
            .timings
            .iter()
            .filter(|t| t.turn == batch.turn && batch.ready.contains(&t.subtask_id))
            .collect();
        let latest_start = spans.iter().map(|t| t.start).max().unwrap();
        let earliest_end = spans.iter().map(|t| t.end).min().unwrap();
        latest_start < earliest_end
    })
}

pub fn no_retry_config(blind: bool) -> EpisodeConfig {
    EpisodeConfig {
        retry: RetryPolicy {
            max_retries: 0,
            backoff_ms: 0,
        },
        blind,
        ..EpisodeConfig::default()
    }
}

pub async fn run_dag(
    deps: &BTreeMap<u32, BTreeSet<u32>>,
    registry: &PoolRegistry,
    backend: &dyn WorkerBackend,
    seed: u64,
) -> EpisodeOutcome {
    let mut policy = PlanPolicy::new(deps.clone());
    let spec = EpisodeSpec {
        episode_id: format!("dag-{seed}"),
        seed,
    };
    let (doc, outcome) = run_episode("dag", &mut policy, registry, backend, &no_retry_config(true), &spec)
        .await
        .unwrap();
    assert!(orchestra::grammar::validate_trajectory(&doc, None).valid);
    outcome
}

// ---------------------------------------------------------------------------
// Curriculum
// ---------------------------------------------------------------------------

pub const TEACHERS: [&str; 3] = ["t-first", "t-second", "t-third"];

/// Well-formed probe rows spread over all four cells of the split.
pub fn random_probes(rng: &mut ChaCha8Rng, n: usize) -> Vec<ProbeResult> {
    (0..n)
        .map(|i| {
            let infra = rng.random_bool(0.02);
            let b0 = rng.random_bool(0.1);
            let b_star = rng.random_bool(0.3);
            ProbeResult {
                task_id: format!("task-{i:05}"),
                b0: (!infra).then_some(b0),
                b_star: (!infra).then_some(b_star),
                teacher: (!infra && b_star).then(|| "teacher".to_string()),
                teacher_trace: (!infra && b_star).then(|| format!("trace-{i}")),
                infra_flag: infra,
            }
        })
        .collect()
}

/// Oracle buckets straight from the split rule.
pub fn oracle_buckets(probes: &[ProbeResult]) -> (BTreeSet<String>, BTreeSet<String>, BTreeSet<String>) {
    let (mut sft, mut rl, mut discarded) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for p in probes {
        let id = p.task_id.clone();
        match (p.infra_flag, p.b0, p.b_star) {
            (true, _, _) | (false, Some(true), _) => discarded.insert(id),
            (false, Some(false), Some(true)) => sft.insert(id),
            _ => rl.insert(id),
        };
    }
    (sft, rl, discarded)
}

/// Retry rows in cascade order; some tasks succeed under several teachers.
pub fn random_retries(rng: &mut ChaCha8Rng, rl: &[String]) -> Vec<RetryResult> {
    let mut out = Vec::new();
    for teacher in TEACHERS {
        for task in rl {
            if rng.random_bool(0.15) {
                out.push(RetryResult {
                    task_id: task.clone(),
                    success: rng.random_bool(0.7),
                    teacher: teacher.to_string(),
                    trace: Some(format!("{teacher}/{task}")),
                });
            }
        }
    }
    out
}

/// Checks promotion against the retry rows: first success per task wins, the
/// remaining RL pool keeps its order, and nothing else moves.
pub fn check_promotion(
    before: &CurriculumManifest,
    retries: &[RetryResult],
    after: &CurriculumManifest,
) -> Result<(), String> {
    let mut first: BTreeMap<&str, &str> = BTreeMap::new();
    for r in retries.iter().filter(|r| r.success) {
        first.entry(r.task_id.as_str()).or_insert(r.teacher.as_str());
    }
    let expected_rl: Vec<&String> = before.rl.iter().filter(|t| !first.contains_key(t.as_str())).collect();
    if after.rl.iter().collect::<Vec<_>>() != expected_rl {
        return Err("remaining RL pool differs".into());
    }
    if after.sft.len() != before.sft.len() + first.len() || after.sft[..before.sft.len()] != before.sft[..] {
        return Err("existing SFT rows changed or promotion count is off".into());
    }
    for row in &after.sft[before.sft.len()..] {
        if first.get(row.task_id.as_str()) != Some(&row.teacher.as_str()) {
            return Err(format!("{} credited to {}", row.task_id, row.teacher));
        }
        if row.distillation_pass != DistillationPass::Fallback {
            return Err(format!("{} not marked fallback", row.task_id));
        }
    }
    if after.discarded != before.discarded {
        return Err("discards changed".into());
    }
    after.check_partition().map_err(|e| e.to_string())?;
    if after.task_count() != before.task_count() {
        return Err("task count changed".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batch runs

/// The fixture pool's scripted workers under the rule-based policy.
pub async fn demo_batch(tasks: &[TaskRecord], seed: u64, attempts: u32) -> BatchOutput {
    let registry = Arc::new(fixture_pool());
    let backend = BackendRouter::from_registry(registry.clone(), 16).unwrap();
    let grouping = Grouping::load(&fixtures().join("grouping.json")).ok();
    let config = BatchConfig {
        seed,
        attempts,
        ..BatchConfig::default()
    };
    let factory = |t: &TaskRecord| builtin_policy("rule", t).unwrap();
    let known = grouping.filter(|g| tasks.iter().all(|t| g.get(t.benchmark()).is_some()));
    run_batch(tasks, &factory, &registry, &backend, &config, known.as_ref())
        .await
        .unwrap()
}

/// Relative path to contents for every file under `dir`.
pub fn dir_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}
