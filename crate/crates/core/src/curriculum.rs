//! Verifier-gated curriculum: the probe split into SFT and RL pools,
//! augmentation provenance, the fallback cascade and failure labelling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::verify::GoldSpec;

/// Teachers retried on RL-pool tasks, weakest first.
pub const FALLBACK_CASCADE: [&str; 3] = ["gemini-2.5-pro", "claude-sonnet-4-6", "gpt-5.4"];
/// Sampling temperatures of the extra teacher rollouts for SFT tasks.
pub const SFT_AUGMENT_TEMPS: [f64; 2] = [0.5, 1.0];
/// Sampling temperatures of the extra teacher rollouts for RL-pool tasks.
pub const RL_AUGMENT_TEMPS: [f64; 3] = [0.3, 0.7, 1.0];
/// Independent attempts per probe.
pub const PROBE_ATTEMPTS: usize = 3;
pub const MAX_REPAIR_ROUNDS: usize = 3;
pub const MAX_CONSTRAINT_WORDS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurriculumError {
    #[error("task {0} appears more than once")]
    DuplicateTask(String),
    #[error("probe for {0} is not infra-flagged but lacks a verdict")]
    MissingVerdict(String),
    #[error("probe for {0} carries a teacher trace without a teacher success")]
    TraceWithoutSuccess(String),
    #[error("task {0} is not in the RL pool")]
    NotInRl(String),
    #[error("task {0} is not in the SFT pool")]
    NotInSft(String),
    #[error("label `{0}` is outside the failure taxonomy")]
    UnknownCategory(String),
    #[error("evidence span does not occur in the trace")]
    EvidenceNotInTrace,
    #[error("suggested constraint has {0} words, limit is 30")]
    ConstraintTooLong(usize),
    #[error("at most {MAX_REPAIR_ROUNDS} prompt-repair rounds are recorded")]
    TooManyRepairRounds,
    #[error("manifest partition broken: task {0} sits in two buckets")]
    Partition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityAxis {
    AtomicReasoning,
    CompositionalReasoning,
    KnowledgeRetrieval,
    MultiHopComposition,
    ToolAndCode,
    AgenticLongContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub query: String,
    pub gold: GoldSpec,
    /// Dataset tag.
    pub source: String,
    pub axis: CapabilityAxis,
    /// Scoreboard row; defaults to `source`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<String>,
}

impl TaskRecord {
    pub fn benchmark(&self) -> &str {
        self.benchmark.as_deref().unwrap_or(&self.source)
    }
}

/// Draws up to `quotas[source]` tasks per source without replacement, keeping
/// input order within the draw. Sources without a quota are skipped.
pub fn sample_balanced(tasks: &[TaskRecord], quotas: &BTreeMap<String, usize>, seed: u64) -> Vec<TaskRecord> {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in tasks.iter().enumerate() {
        by_source.entry(t.source.as_str()).or_default().push(i);
    }
    let mut picked = Vec::new();
    for (source, idx) in &by_source {
        let Some(&quota) = quotas.get(*source) else { continue };
        let n = quota.min(idx.len());
        picked.extend(sample(&mut rng, idx.len(), n).into_iter().map(|j| idx[j]));
    }
    picked.sort_unstable();
    picked.into_iter().map(|i| tasks[i].clone()).collect()
}

/// Accepts `true`/`false` or `0`/`1`.
fn de_bit<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Bool(bool),
        Int(u8),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Bool(b)) => Ok(Some(b)),
        Some(Raw::Int(0)) => Ok(Some(false)),
        Some(Raw::Int(1)) => Ok(Some(true)),
        Some(Raw::Int(n)) => Err(serde::de::Error::custom(format!("verdict must be 0 or 1, got {n}"))),
    }
}

fn ser_bit<S: serde::Serializer>(b: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
    match b {
        Some(v) => s.serialize_u8(u8::from(*v)),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task_id: String,
    /// Cold-start router verdict at pass@3.
    #[serde(default, deserialize_with = "de_bit", serialize_with = "ser_bit")]
    pub b0: Option<bool>,
    /// Teacher verdict at pass@3.
    #[serde(default, deserialize_with = "de_bit", serialize_with = "ser_bit")]
    pub b_star: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_trace: Option<String>,
    #[serde(default)]
    pub infra_flag: bool,
}

/// pass@k verdict from independent attempts.
pub fn any_pass(verdicts: &[bool]) -> bool {
    verdicts.iter().any(|b| *b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillationPass {
    Primary,
    Augmentation,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Solved,
    Infra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftEntry {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    pub teacher: String,
    pub distillation_pass: DistillationPass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardEntry {
    pub task_id: String,
    pub reason: DiscardReason,
}

/// Constraints added to the teacher prompt in one repair round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairRound {
    pub round: u32,
    pub constraints: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurriculumManifest {
    pub sft: Vec<SftEntry>,
    pub rl: Vec<String>,
    pub discarded: Vec<DiscardEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repair_rounds: Vec<RepairRound>,
}

impl CurriculumManifest {
    pub fn sft_tasks(&self) -> BTreeSet<&str> {
        self.sft.iter().map(|e| e.task_id.as_str()).collect()
    }

    pub fn rl_tasks(&self) -> BTreeSet<&str> {
        self.rl.iter().map(String::as_str).collect()
    }

    pub fn discarded_tasks(&self) -> BTreeSet<&str> {
        self.discarded.iter().map(|e| e.task_id.as_str()).collect()
    }

    /// Every task in exactly one bucket.
    pub fn check_partition(&self) -> Result<(), CurriculumError> {
        let mut owner: BTreeMap<&str, u8> = BTreeMap::new();
        let buckets = [self.sft_tasks(), self.discarded_tasks()];
        for (b, tasks) in buckets.iter().enumerate() {
            for t in tasks {
                if owner.insert(t, b as u8).is_some() {
                    return Err(CurriculumError::Partition(t.to_string()));
                }
            }
        }
        for t in &self.rl {
            if owner.insert(t, 2).is_some() {
                return Err(CurriculumError::Partition(t.clone()));
            }
        }
        Ok(())
    }

    pub fn task_count(&self) -> usize {
        self.sft_tasks().len() + self.rl.len() + self.discarded.len()
    }
}

/// Splits probed tasks: solved or infra-polluted tasks are discarded, teacher
/// successes enter SFT, the rest form the RL pool.
pub fn probe_split(probes: &[ProbeResult]) -> Result<CurriculumManifest, CurriculumError> {
    let mut seen = BTreeSet::new();
    let mut manifest = CurriculumManifest::default();
    for p in probes {
        if !seen.insert(p.task_id.as_str()) {
            return Err(CurriculumError::DuplicateTask(p.task_id.clone()));
        }
        if p.infra_flag {
            manifest.discarded.push(DiscardEntry {
                task_id: p.task_id.clone(),
                reason: DiscardReason::Infra,
            });
            continue;
        }
        let (Some(b0), Some(b_star)) = (p.b0, p.b_star) else {
            return Err(CurriculumError::MissingVerdict(p.task_id.clone()));
        };
        if p.teacher_trace.is_some() && !b_star {
            return Err(CurriculumError::TraceWithoutSuccess(p.task_id.clone()));
        }
        if b0 {
            manifest.discarded.push(DiscardEntry {
                task_id: p.task_id.clone(),
                reason: DiscardReason::Solved,
            });
        } else if b_star {
            manifest.sft.push(SftEntry {
                task_id: p.task_id.clone(),
                trace: p.teacher_trace.clone(),
                teacher: p.teacher.clone().unwrap_or_else(|| "teacher".into()),
                distillation_pass: DistillationPass::Primary,
                temperature: None,
            });
        } else {
            manifest.rl.push(p.task_id.clone());
        }
    }
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryResult {
    pub task_id: String,
    pub success: bool,
    pub teacher: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

/// Moves RL tasks with a successful retry into SFT as `fallback` rows. The
/// first success per task wins, so callers list retries in cascade order.
pub fn cascade_promote(
    manifest: &CurriculumManifest,
    retries: &[RetryResult],
) -> Result<CurriculumManifest, CurriculumError> {
    let rl = manifest.rl_tasks();
    if let Some(bad) = retries.iter().find(|r| !rl.contains(r.task_id.as_str())) {
        return Err(CurriculumError::NotInRl(bad.task_id.clone()));
    }
    let mut winners: BTreeMap<&str, &RetryResult> = BTreeMap::new();
    for r in retries.iter().filter(|r| r.success) {
        winners.entry(r.task_id.as_str()).or_insert(r);
    }
    let mut out = manifest.clone();
    out.rl.retain(|t| !winners.contains_key(t.as_str()));
    // keep promotion order stable: follow the original RL order
    for task in &manifest.rl {
        if let Some(r) = winners.get(task.as_str()) {
            out.sft.push(SftEntry {
                task_id: task.clone(),
                trace: r.trace.clone(),
                teacher: r.teacher.clone(),
                distillation_pass: DistillationPass::Fallback,
                temperature: None,
            });
        }
    }
    Ok(out)
}

/// Tries each teacher in order on the tasks still in RL and promotes successes.
pub fn run_cascade<F>(
    manifest: &CurriculumManifest,
    teachers: &[&str],
    mut attempt: F,
) -> Result<CurriculumManifest, CurriculumError>
where
    F: FnMut(&str, &str) -> Option<String>,
{
    let mut current = manifest.clone();
    for teacher in teachers {
        let retries: Vec<RetryResult> = current
            .rl
            .iter()
            .map(|task| {
                let trace = attempt(task, teacher);
                RetryResult {
                    task_id: task.clone(),
                    success: trace.is_some(),
                    teacher: teacher.to_string(),
                    trace,
                }
            })
            .collect();
        current = cascade_promote(&current, &retries)?;
    }
    Ok(current)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRollout {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    pub temperature: f64,
    pub passed: bool,
    #[serde(default = "default_teacher")]
    pub teacher: String,
}

fn default_teacher() -> String {
    "teacher".into()
}

/// Appends verifier-passing extra rollouts of SFT tasks; failing ones are dropped.
pub fn record_augmentation(
    manifest: &CurriculumManifest,
    extra: &[AugmentationRollout],
) -> Result<CurriculumManifest, CurriculumError> {
    let sft = manifest.sft_tasks();
    if let Some(bad) = extra.iter().find(|e| !sft.contains(e.task_id.as_str())) {
        return Err(CurriculumError::NotInSft(bad.task_id.clone()));
    }
    let mut out = manifest.clone();
    out.sft.extend(extra.iter().filter(|e| e.passed).map(|e| SftEntry {
        task_id: e.task_id.clone(),
        trace: e.trace.clone(),
        teacher: e.teacher.clone(),
        distillation_pass: DistillationPass::Augmentation,
        temperature: Some(e.temperature),
    }));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    InformationLoss,
    PrematureAggregation,
    FormatMismatch,
    DelegationScopeError,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 4] = [
        FailureCategory::InformationLoss,
        FailureCategory::PrematureAggregation,
        FailureCategory::FormatMismatch,
        FailureCategory::DelegationScopeError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureCategory::InformationLoss => "information_loss",
            FailureCategory::PrematureAggregation => "premature_aggregation",
            FailureCategory::FormatMismatch => "format_mismatch",
            FailureCategory::DelegationScopeError => "delegation_scope_error",
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == label.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureLabel {
    pub category: FailureCategory,
    pub evidence_span: String,
    pub suggested_constraint: String,
}

/// Raw output of a failure judge before validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeOutput {
    pub category: String,
    pub evidence_span: String,
    pub suggested_constraint: String,
}

/// Labels a failed trace with a pluggable judge and validates its answer.
pub fn classify_failure<F>(trace: &str, gold: &str, judge: F) -> Result<FailureLabel, CurriculumError>
where
    F: FnOnce(&str, &str) -> JudgeOutput,
{
    let out = judge(trace, gold);
    let category =
        FailureCategory::parse(&out.category).ok_or_else(|| CurriculumError::UnknownCategory(out.category.clone()))?;
    if out.evidence_span.is_empty() || !trace.contains(&out.evidence_span) {
        return Err(CurriculumError::EvidenceNotInTrace);
    }
    let words = out.suggested_constraint.split_whitespace().count();
    if words > MAX_CONSTRAINT_WORDS {
        return Err(CurriculumError::ConstraintTooLong(words));
    }
    Ok(FailureLabel {
        category,
        evidence_span: out.evidence_span,
        suggested_constraint: out.suggested_constraint,
    })
}

/// One constraint per category seen at least `min_count` times, taken from
/// that category's first label.
pub fn repair_constraints(labels: &[FailureLabel], min_count: usize) -> Vec<String> {
    let mut counts: BTreeMap<FailureCategory, (usize, &str)> = BTreeMap::new();
    for l in labels {
        counts
            .entry(l.category)
            .or_insert((0, l.suggested_constraint.as_str()))
            .0 += 1;
    }
    counts
        .values()
        .filter(|(n, _)| *n >= min_count.max(1))
        .map(|(_, c)| c.to_string())
        .collect()
}

/// Records one prompt-repair round as manifest metadata.
pub fn record_repair_round(
    manifest: &CurriculumManifest,
    constraints: Vec<String>,
) -> Result<CurriculumManifest, CurriculumError> {
    if manifest.repair_rounds.len() >= MAX_REPAIR_ROUNDS {
        return Err(CurriculumError::TooManyRepairRounds);
    }
    let mut out = manifest.clone();
    out.repair_rounds.push(RepairRound {
        round: manifest.repair_rounds.len() as u32 + 1,
        constraints,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(id: &str, b0: bool, b_star: bool) -> ProbeResult {
        ProbeResult {
            task_id: id.into(),
            b0: Some(b0),
            b_star: Some(b_star),
            teacher: None,
            teacher_trace: b_star.then(|| format!("{id}.traj.xml")),
            infra_flag: false,
        }
    }

    #[test]
    fn quota_sampler() {
        let task = |i: usize, src: &str| TaskRecord {
            task_id: format!("{src}-{i}"),
            query: "q".into(),
            gold: serde_json::from_str(r#"{"kind":"qa","gold":"x"}"#).unwrap(),
            source: src.into(),
            axis: CapabilityAxis::AtomicReasoning,
            benchmark: None,
        };
        let tasks: Vec<_> = (0..10)
            .map(|i| task(i, "a"))
            .chain((0..3).map(|i| task(i, "b")))
            .chain([task(0, "c")])
            .collect();
        let quotas = BTreeMap::from([("a".to_string(), 4), ("b".to_string(), 5)]);
        let s = sample_balanced(&tasks, &quotas, 7);
        assert_eq!(s.iter().filter(|t| t.source == "a").count(), 4);
        assert_eq!(s.iter().filter(|t| t.source == "b").count(), 3);
        assert!(s.iter().all(|t| t.source != "c"));
        assert_eq!(s, sample_balanced(&tasks, &quotas, 7));
    }

    #[test]
    fn split_cells() {
        let mut infra = probe("d", false, false);
        infra.infra_flag = true;
        infra.b0 = None;
        let m = probe_split(&[
            probe("a", true, true),
            probe("b", false, true),
            probe("c", false, false),
            infra,
        ])
        .unwrap();
        assert_eq!(m.discarded.len(), 2);
        assert_eq!(m.discarded[0].reason, DiscardReason::Solved);
        assert_eq!(m.discarded[1].reason, DiscardReason::Infra);
        assert_eq!(m.sft[0].task_id, "b");
        assert_eq!(m.sft[0].distillation_pass, DistillationPass::Primary);
        assert_eq!(m.rl, vec!["c".to_string()]);
        m.check_partition().unwrap();
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            probe_split(&[probe("a", false, false), probe("a", true, true)]),
            Err(CurriculumError::DuplicateTask(_))
        ));
        let mut p = probe("a", false, false);
        p.b_star = None;
        assert!(matches!(probe_split(&[p]), Err(CurriculumError::MissingVerdict(_))));
        let mut p = probe("a", false, false);
        p.teacher_trace = Some("x".into());
        assert!(matches!(
            probe_split(&[p]),
            Err(CurriculumError::TraceWithoutSuccess(_))
        ));
    }

    #[test]
    fn probe_json_accepts_ints() {
        let p: ProbeResult = serde_json::from_str(r#"{"task_id":"t","b0":0,"b_star":true}"#).unwrap();
        assert_eq!((p.b0, p.b_star), (Some(false), Some(true)));
        assert!(serde_json::from_str::<ProbeResult>(r#"{"task_id":"t","b0":2}"#).is_err());
    }

    #[test]
    fn promotion() {
        let m = probe_split(&[
            probe("a", false, false),
            probe("b", false, false),
            probe("c", false, true),
        ])
        .unwrap();
        let same = cascade_promote(&m, &[]).unwrap();
        assert_eq!(same, m);
        let retries = [
            RetryResult {
                task_id: "a".into(),
                success: false,
                teacher: FALLBACK_CASCADE[0].into(),
                trace: None,
            },
            RetryResult {
                task_id: "a".into(),
                success: true,
                teacher: FALLBACK_CASCADE[1].into(),
                trace: Some("a2".into()),
            },
        ];
        let p = cascade_promote(&m, &retries).unwrap();
        assert_eq!(p.rl, vec!["b".to_string()]);
        let row = p.sft.iter().find(|e| e.task_id == "a").unwrap();
        assert_eq!(
            (row.teacher.as_str(), row.distillation_pass),
            ("claude-sonnet-4-6", DistillationPass::Fallback)
        );
        let bad = RetryResult {
            task_id: "c".into(),
            success: true,
            teacher: "x".into(),
            trace: None,
        };
        assert!(matches!(cascade_promote(&m, &[bad]), Err(CurriculumError::NotInRl(_))));
    }

    #[test]
    fn cascade_order() {
        let m = probe_split(&[probe("a", false, false), probe("b", false, false)]).unwrap();
        let out = run_cascade(&m, &FALLBACK_CASCADE, |task, teacher| {
            (task == "a" && teacher == "gpt-5.4").then(|| "trace".to_string())
        })
        .unwrap();
        assert_eq!(out.rl, vec!["b".to_string()]);
        assert_eq!(out.sft[0].teacher, "gpt-5.4");
    }

    #[test]
    fn augmentation() {
        let m = probe_split(&[probe("s", false, true), probe("r", false, false)]).unwrap();
        let extra: Vec<AugmentationRollout> = SFT_AUGMENT_TEMPS
            .iter()
            .map(|t| AugmentationRollout {
                task_id: "s".into(),
                trace: None,
                temperature: *t,
                passed: true,
                teacher: "teacher".into(),
            })
            .collect();
        let out = record_augmentation(&m, &extra).unwrap();
        assert_eq!(out.sft.iter().filter(|e| e.task_id == "s").count(), 3);
        let mut failing = extra[0].clone();
        failing.passed = false;
        assert_eq!(record_augmentation(&m, &[failing]).unwrap(), m);
        let mut rl = extra[0].clone();
        rl.task_id = "r".into();
        assert!(matches!(
            record_augmentation(&m, &[rl]),
            Err(CurriculumError::NotInSft(_))
        ));
    }

    #[test]
    fn failure_labels() {
        let trace = "<obs subtask=\"2\">partial list</obs><final_answer>merged</final_answer>";
        let ok = classify_failure(trace, "gold", |_, _| JudgeOutput {
            category: "premature_aggregation".into(),
            evidence_span: "partial list".into(),
            suggested_constraint: "Wait for every dependency before aggregating.".into(),
        })
        .unwrap();
        assert_eq!(ok.category, FailureCategory::PrematureAggregation);
        let other = classify_failure(trace, "gold", |_, _| JudgeOutput {
            category: "other".into(),
            evidence_span: "partial list".into(),
            suggested_constraint: String::new(),
        });
        assert!(matches!(other, Err(CurriculumError::UnknownCategory(_))));
        let missing = classify_failure(trace, "gold", |_, _| JudgeOutput {
            category: "format_mismatch".into(),
            evidence_span: "not there".into(),
            suggested_constraint: String::new(),
        });
        assert_eq!(missing, Err(CurriculumError::EvidenceNotInTrace));
        let long = classify_failure(trace, "gold", |_, _| JudgeOutput {
            category: "format_mismatch".into(),
            evidence_span: "merged".into(),
            suggested_constraint: "word ".repeat(31),
        });
        assert_eq!(long, Err(CurriculumError::ConstraintTooLong(31)));
    }

    #[test]
    fn repair_rounds_cap() {
        let label = |c| FailureLabel {
            category: c,
            evidence_span: "x".into(),
            suggested_constraint: format!("avoid {c:?}"),
        };
        let labels = [
            label(FailureCategory::InformationLoss),
            label(FailureCategory::InformationLoss),
            label(FailureCategory::FormatMismatch),
        ];
        assert_eq!(
            repair_constraints(&labels, 2),
            vec!["avoid InformationLoss".to_string()]
        );
        let mut m = CurriculumManifest::default();
        for _ in 0..3 {
            m = record_repair_round(&m, repair_constraints(&labels, 1)).unwrap();
        }
        assert_eq!(m.repair_rounds[2].round, 3);
        assert_eq!(
            record_repair_round(&m, vec![]),
            Err(CurriculumError::TooManyRepairRounds)
        );
    }
}
