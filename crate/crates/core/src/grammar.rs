//! Trajectory grammar: parse, validate, serialize and classify orchestration
//! trajectories.
//!
//! A trajectory is a flat stream of five block kinds (`<plan>`, `<route>`,
//! `<obs>`, `<verify>`, `<final_answer>`) under a `<trajectory>` root that
//! also carries the `<query>`. Turns are not delimited explicitly; they are
//! recovered while scanning:
//!
//! * `<plan>` always opens a new turn;
//! * `<verify>` closes the open turn;
//! * a `<route>` with no open turn, or following the single route of a
//!   plan-less turn, opens a new plan-less turn (implicit singleton plan)
//!   whose round is one past the previous turn's round;
//! * so does a `<route>` arriving after observations of a planned turn when
//!   it does not target one of that plan's still-unrouted subtasks.
//!
//! The canonical byte form places each turn's routes before its
//! observations and moves every `<final_answer>` to the end.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::PoolRegistry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("malformed xml: {0}")]
    MalformedXml(String),
    #[error("unknown element <{0}>")]
    UnknownElement(String),
    #[error("element <{child}> may not appear inside <{parent}>")]
    UnknownNesting { child: String, parent: String },
    #[error("<{element}> is missing attribute `{attribute}`")]
    MissingAttribute { element: String, attribute: String },
    #[error("<{element}> has invalid attribute `{attribute}`: {value:?}")]
    InvalidAttribute {
        element: String,
        attribute: String,
        value: String,
    },
    #[error("missing <{0}> element")]
    MissingElement(String),
    #[error("<{element}> out of place: {reason}")]
    Misplaced { element: String, reason: String },
    #[error("document violates the grammar: {0}")]
    InvalidDoc(ValidationReport),
    #[error("cannot classify a document that violates the grammar: {0}")]
    Unclassifiable(ValidationReport),
}

/// One node of a plan's subtask DAG.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub id: u32,
    pub depends_on: BTreeSet<u32>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlanBlock {
    pub subtasks: Vec<Subtask>,
}

impl PlanBlock {
    pub fn ids(&self) -> BTreeSet<u32> {
        self.subtasks.iter().map(|s| s.id).collect()
    }

    pub fn get(&self, id: u32) -> Option<&Subtask> {
        self.subtasks.iter().find(|s| s.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteBlock {
    pub subtask_id: u32,
    pub model: String,
    pub skill: String,
    pub payload: String,
    /// Routes found nested inside this one. Only the lenient parser fills
    /// this; the validator reports any entry as `no-nested-route`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nested: Vec<RouteBlock>,
}

impl RouteBlock {
    pub fn new(subtask_id: u32, model: &str, skill: &str, payload: &str) -> Self {
        Self {
            subtask_id,
            model: model.to_string(),
            skill: skill.to_string(),
            payload: payload.to_string(),
            nested: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsBlock {
    pub subtask_id: u32,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyBlock {
    pub body: String,
    pub replan: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnBlock {
    pub round: u32,
    pub plan: Option<PlanBlock>,
    pub routes: Vec<RouteBlock>,
    pub observations: Vec<ObsBlock>,
    pub verify: Option<VerifyBlock>,
}

impl TurnBlock {
    /// Subtask ids this turn declares: the explicit plan's ids, or the
    /// single routed id of a plan-less turn.
    pub fn declared_ids(&self) -> BTreeSet<u32> {
        match &self.plan {
            Some(plan) => plan.ids(),
            None => self.routes.iter().map(|r| r.subtask_id).take(1).collect(),
        }
    }

    /// The turn's plan, materializing the implicit singleton plan of a
    /// plan-less turn.
    pub fn effective_plan(&self) -> PlanBlock {
        match &self.plan {
            Some(plan) => plan.clone(),
            None => PlanBlock {
                subtasks: self
                    .routes
                    .iter()
                    .take(1)
                    .map(|r| Subtask {
                        id: r.subtask_id,
                        depends_on: BTreeSet::new(),
                        description: String::new(),
                    })
                    .collect(),
            },
        }
    }
}

/// A parsed trajectory. `final_answers` holds every `<final_answer>` seen so
/// that invalid documents stay representable; a valid one has exactly one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryDoc {
    pub query: String,
    pub turns: Vec<TurnBlock>,
    pub final_answers: Vec<String>,
}

impl TrajectoryDoc {
    pub fn final_answer(&self) -> Option<&str> {
        match self.final_answers.as_slice() {
            [one] => Some(one.as_str()),
            _ => None,
        }
    }

    pub fn routes(&self) -> impl Iterator<Item = &RouteBlock> {
        self.turns.iter().flat_map(|t| t.routes.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    SingleFinalAnswer,
    MonotoneRounds,
    DagAcyclic,
    ClosedVocabulary,
    NoNestedRoute,
    /// A route names a subtask the turn's plan does not declare.
    UndeclaredSubtask,
    /// Two routes in one turn target the same subtask.
    DuplicateRoute,
    /// A subtask id is declared twice in the trajectory.
    DuplicateSubtask,
    /// A `depends_on` entry names no declared subtask.
    UnknownDependency,
    /// A plan-less turn must carry exactly one route.
    ImplicitPlanArity,
    /// A plan-less turn's round must be one past its predecessor's.
    ImplicitRound,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::SingleFinalAnswer => "single-final-answer",
            ViolationCode::MonotoneRounds => "monotone-rounds",
            ViolationCode::DagAcyclic => "dag-acyclic",
            ViolationCode::ClosedVocabulary => "closed-vocabulary",
            ViolationCode::NoNestedRoute => "no-nested-route",
            ViolationCode::UndeclaredSubtask => "undeclared-subtask",
            ViolationCode::DuplicateRoute => "duplicate-route",
            ViolationCode::DuplicateSubtask => "duplicate-subtask",
            ViolationCode::UnknownDependency => "unknown-dependency",
            ViolationCode::ImplicitPlanArity => "implicit-plan-arity",
            ViolationCode::ImplicitRound => "implicit-round",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            valid: violations.is_empty(),
            violations,
        }
    }

    /// Distinct violation codes, sorted.
    pub fn codes(&self) -> Vec<ViolationCode> {
        let set: BTreeSet<_> = self.violations.iter().map(|v| v.code).collect();
        set.into_iter().collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            return f.write_str("valid");
        }
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{} at {}: {}", v.code, v.location, v.message))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behaviour {
    Lazy,
    Oneshot,
    Continuation,
    DecompRepair,
}

impl Behaviour {
    pub const ALL: [Behaviour; 4] = [
        Behaviour::Lazy,
        Behaviour::Oneshot,
        Behaviour::Continuation,
        Behaviour::DecompRepair,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Behaviour::Lazy => "lazy",
            Behaviour::Oneshot => "oneshot",
            Behaviour::Continuation => "continuation",
            Behaviour::DecompRepair => "decomp_repair",
        }
    }
}

impl fmt::Display for Behaviour {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum Node {
    Element(Element),
    Text(String),
}

#[derive(Debug)]
struct Element {
    name: String,
    attrs: BTreeMap<String, String>,
    children: Vec<Node>,
}

impl Element {
    fn attr(&self, key: &str) -> Result<&str, GrammarError> {
        self.attrs
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| GrammarError::MissingAttribute {
                element: self.name.clone(),
                attribute: key.to_string(),
            })
    }

    fn positive_attr(&self, key: &str) -> Result<u32, GrammarError> {
        let raw = self.attr(key)?;
        parse_positive(raw).ok_or_else(|| GrammarError::InvalidAttribute {
            element: self.name.clone(),
            attribute: key.to_string(),
            value: raw.to_string(),
        })
    }

    fn check_attrs(&self, allowed: &[&str]) -> Result<(), GrammarError> {
        match self.attrs.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(extra) => Err(GrammarError::InvalidAttribute {
                element: self.name.clone(),
                attribute: extra.clone(),
                value: self.attrs[extra].clone(),
            }),
            None => Ok(()),
        }
    }
}

fn parse_positive(raw: &str) -> Option<u32> {
    let raw = raw.trim();
    if raw.is_empty() || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    raw.parse::<u32>().ok().filter(|v| *v > 0)
}

fn parse_id_set(raw: &str) -> Option<BTreeSet<u32>> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Some(BTreeSet::new());
    }
    trimmed
        .split([',', ' '])
        .filter(|p| !p.is_empty())
        .map(parse_positive)
        .collect()
}

const ELEMENTS: [&str; 9] = [
    "trajectory",
    "query",
    "plan",
    "subtask",
    "route",
    "obs",
    "verify",
    "replan",
    "final_answer",
];

fn malformed(err: impl fmt::Display) -> GrammarError {
    GrammarError::MalformedXml(err.to_string())
}

/// Builds a generic element tree, rejecting tag soup and unknown names.
fn build_tree(raw: &str) -> Result<Vec<Node>, GrammarError> {
    let mut reader = Reader::from_str(raw);
    reader.config_mut().check_end_names = true;
    let mut stack: Vec<Element> = Vec::new();
    let mut top: Vec<Node> = Vec::new();

    fn push_node(stack: &mut [Element], top: &mut Vec<Node>, node: Node) {
        let children = match stack.last_mut() {
            Some(parent) => &mut parent.children,
            None => top,
        };
        if let (Node::Text(new), Some(Node::Text(prev))) = (&node, children.last_mut()) {
            prev.push_str(new);
            return;
        }
        children.push(node);
    }

    fn open(e: &quick_xml::events::BytesStart<'_>) -> Result<Element, GrammarError> {
        let name = String::from_utf8(e.name().as_ref().to_vec()).map_err(malformed)?;
        if !ELEMENTS.contains(&name.as_str()) {
            return Err(GrammarError::UnknownElement(name));
        }
        let mut attrs = BTreeMap::new();
        for attr in e.attributes() {
            let attr = attr.map_err(malformed)?;
            let key = String::from_utf8(attr.key.as_ref().to_vec()).map_err(malformed)?;
            let value = attr.unescape_value().map_err(malformed)?.into_owned();
            if attrs.insert(key.clone(), value).is_some() {
                return Err(malformed(format!("duplicate attribute `{key}` on <{name}>")));
            }
        }
        Ok(Element {
            name,
            attrs,
            children: Vec::new(),
        })
    }

    loop {
        match reader.read_event().map_err(malformed)? {
            Event::Start(e) => stack.push(open(&e)?),
            Event::Empty(e) => {
                let el = open(&e)?;
                push_node(&mut stack, &mut top, Node::Element(el));
            }
            Event::End(_) => {
                let el = stack.pop().ok_or_else(|| malformed("unbalanced end tag"))?;
                push_node(&mut stack, &mut top, Node::Element(el));
            }
            Event::Text(t) => {
                let text = t.decode().map_err(malformed)?.into_owned();
                push_node(&mut stack, &mut top, Node::Text(text));
            }
            Event::CData(t) => {
                let text = t.decode().map_err(malformed)?.into_owned();
                push_node(&mut stack, &mut top, Node::Text(text));
            }
            Event::GeneralRef(r) => {
                let text = if let Some(ch) = r.resolve_char_ref().map_err(malformed)? {
                    ch.to_string()
                } else {
                    let name = r.decode().map_err(malformed)?;
                    quick_xml::escape::resolve_predefined_entity(&name)
                        .ok_or_else(|| malformed(format!("unknown entity &{name};")))?
                        .to_string()
                };
                push_node(&mut stack, &mut top, Node::Text(text));
            }
            Event::Comment(_) | Event::Decl(_) | Event::PI(_) => {}
            Event::DocType(_) => return Err(malformed("DOCTYPE is not allowed")),
            Event::Eof => break,
        }
    }
    if let Some(open) = stack.last() {
        return Err(malformed(format!("unclosed <{}>", open.name)));
    }
    Ok(top)
}

/// Collects the text of a leaf element; any child element is a nesting error.
fn leaf_text(el: Element) -> Result<String, GrammarError> {
    let mut out = String::new();
    for child in el.children {
        match child {
            Node::Text(t) => out.push_str(&t),
            Node::Element(c) => {
                return Err(GrammarError::UnknownNesting {
                    child: c.name,
                    parent: el.name,
                })
            }
        }
    }
    Ok(out)
}

fn ensure_blank(text: &str, parent: &str) -> Result<(), GrammarError> {
    if text.trim().is_empty() {
        Ok(())
    } else {
        Err(malformed(format!("stray text {:?} inside <{parent}>", text.trim())))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum NestingMode {
    Strict,
    Lenient,
}

fn convert_route(el: Element, mode: NestingMode) -> Result<RouteBlock, GrammarError> {
    el.check_attrs(&["subtask", "model", "skill"])?;
    let subtask_id = el.positive_attr("subtask")?;
    let model = el.attr("model")?.to_string();
    let skill = el.attr("skill")?.to_string();
    let mut payload = String::new();
    let mut nested = Vec::new();
    for child in el.children {
        match child {
            Node::Text(t) => payload.push_str(&t),
            Node::Element(c) if c.name == "route" && mode == NestingMode::Lenient => {
                nested.push(convert_route(c, mode)?);
            }
            Node::Element(c) => {
                return Err(GrammarError::UnknownNesting {
                    child: c.name,
                    parent: "route".into(),
                })
            }
        }
    }
    Ok(RouteBlock {
        subtask_id,
        model,
        skill,
        payload,
        nested,
    })
}

fn convert_plan(el: Element) -> Result<(u32, PlanBlock), GrammarError> {
    el.check_attrs(&["round"])?;
    let round = el.positive_attr("round")?;
    let mut subtasks = Vec::new();
    for child in el.children {
        match child {
            Node::Text(t) => ensure_blank(&t, "plan")?,
            Node::Element(c) if c.name == "subtask" => {
                c.check_attrs(&["id", "depends_on"])?;
                let id = c.positive_attr("id")?;
                let raw_deps = c.attrs.get("depends_on").cloned().unwrap_or_default();
                let depends_on = parse_id_set(&raw_deps).ok_or_else(|| GrammarError::InvalidAttribute {
                    element: "subtask".into(),
                    attribute: "depends_on".into(),
                    value: raw_deps.clone(),
                })?;
                let description = leaf_text(c)?;
                subtasks.push(Subtask {
                    id,
                    depends_on,
                    description,
                });
            }
            Node::Element(c) => {
                return Err(GrammarError::UnknownNesting {
                    child: c.name,
                    parent: "plan".into(),
                })
            }
        }
    }
    Ok((round, PlanBlock { subtasks }))
}

fn convert_verify(el: Element) -> Result<VerifyBlock, GrammarError> {
    el.check_attrs(&[])?;
    let mut body = String::new();
    let mut replan = false;
    for child in el.children {
        match child {
            Node::Text(t) => body.push_str(&t),
            Node::Element(c) if c.name == "replan" && c.children.is_empty() => {
                c.check_attrs(&[])?;
                replan = true;
            }
            Node::Element(c) => {
                return Err(GrammarError::UnknownNesting {
                    child: c.name,
                    parent: "verify".into(),
                })
            }
        }
    }
    Ok(VerifyBlock { body, replan })
}

fn convert_doc(nodes: Vec<Node>, mode: NestingMode) -> Result<TrajectoryDoc, GrammarError> {
    // Unwrap an optional <trajectory> root.
    let mut body = Vec::new();
    let mut saw_root = false;
    for node in nodes {
        match node {
            Node::Text(t) => ensure_blank(&t, "document")?,
            Node::Element(el) if el.name == "trajectory" => {
                if saw_root || !body.is_empty() {
                    return Err(malformed("multiple root elements"));
                }
                el.check_attrs(&[])?;
                saw_root = true;
                body = el.children;
            }
            Node::Element(el) => {
                if saw_root {
                    return Err(malformed("content after the <trajectory> root"));
                }
                body.push(Node::Element(el));
            }
        }
    }

    let mut query: Option<String> = None;
    let mut turns: Vec<TurnBlock> = Vec::new();
    let mut open = false;
    let mut final_answers = Vec::new();

    for node in body {
        let el = match node {
            Node::Text(t) => {
                ensure_blank(&t, "trajectory")?;
                continue;
            }
            Node::Element(el) => el,
        };
        match el.name.as_str() {
            "query" => {
                if query.is_some() {
                    return Err(GrammarError::Misplaced {
                        element: "query".into(),
                        reason: "a trajectory has one query".into(),
                    });
                }
                el.check_attrs(&[])?;
                query = Some(leaf_text(el)?);
            }
            "plan" => {
                let (round, plan) = convert_plan(el)?;
                turns.push(TurnBlock {
                    round,
                    plan: Some(plan),
                    routes: Vec::new(),
                    observations: Vec::new(),
                    verify: None,
                });
                open = true;
            }
            "route" => {
                let route = convert_route(el, mode)?;
                let needs_new = match turns.last() {
                    Some(turn) if open => match &turn.plan {
                        None => !turn.routes.is_empty(),
                        Some(plan) => {
                            !turn.observations.is_empty()
                                && (plan.get(route.subtask_id).is_none()
                                    || turn.routes.iter().any(|r| r.subtask_id == route.subtask_id))
                        }
                    },
                    _ => true,
                };
                if needs_new {
                    let round = turns.last().map_or(1, |t| t.round.saturating_add(1));
                    turns.push(TurnBlock {
                        round,
                        plan: None,
                        routes: Vec::new(),
                        observations: Vec::new(),
                        verify: None,
                    });
                    open = true;
                }
                turns.last_mut().expect("turn opened").routes.push(route);
            }
            "obs" => {
                el.check_attrs(&["subtask"])?;
                let subtask_id = el.positive_attr("subtask")?;
                let body = leaf_text(el)?;
                match turns.last_mut() {
                    Some(turn) if open => turn.observations.push(ObsBlock { subtask_id, body }),
                    _ => {
                        return Err(GrammarError::Misplaced {
                            element: "obs".into(),
                            reason: "no open turn to attach the observation to".into(),
                        })
                    }
                }
            }
            "verify" => {
                let verify = convert_verify(el)?;
                match turns.last_mut() {
                    Some(turn) if open => {
                        turn.verify = Some(verify);
                        open = false;
                    }
                    _ => {
                        return Err(GrammarError::Misplaced {
                            element: "verify".into(),
                            reason: "no open turn to verify".into(),
                        })
                    }
                }
            }
            "final_answer" => {
                el.check_attrs(&[])?;
                final_answers.push(leaf_text(el)?);
                open = false;
            }
            other => {
                return Err(GrammarError::UnknownNesting {
                    child: other.to_string(),
                    parent: "trajectory".into(),
                })
            }
        }
    }

    Ok(TrajectoryDoc {
        query: query.ok_or_else(|| GrammarError::MissingElement("query".into()))?,
        turns,
        final_answers,
    })
}

/// Parses one trajectory. A `<route>` nested in another is an error.
pub fn parse_trajectory(raw: &str) -> Result<TrajectoryDoc, GrammarError> {
    convert_doc(build_tree(raw)?, NestingMode::Strict)
}

/// Like [`parse_trajectory`] but keeps nested routes in
/// [`RouteBlock::nested`] so the validator can report them as data.
pub fn parse_trajectory_lenient(raw: &str) -> Result<TrajectoryDoc, GrammarError> {
    convert_doc(build_tree(raw)?, NestingMode::Lenient)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

fn violation(code: ViolationCode, location: String, message: String) -> Violation {
    Violation {
        code,
        location,
        message,
    }
}

/// Kahn's algorithm over the whole trajectory's dependency graph; returns
/// true when some nodes can never be scheduled.
fn has_cycle(edges: &BTreeMap<u32, BTreeSet<u32>>) -> bool {
    let mut indegree: BTreeMap<u32, usize> = edges.keys().map(|k| (*k, 0)).collect();
    for (node, deps) in edges {
        let known = deps.iter().filter(|d| edges.contains_key(d)).count();
        *indegree.get_mut(node).expect("node present") = known;
    }
    let mut queue: Vec<u32> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut seen = 0;
    while let Some(node) = queue.pop() {
        seen += 1;
        for (other, deps) in edges {
            if deps.contains(&node) {
                let d = indegree.get_mut(other).expect("node present");
                *d -= 1;
                if *d == 0 {
                    queue.push(*other);
                }
            }
        }
    }
    seen != edges.len()
}

/// Checks every grammar constraint and returns all violations found.
///
/// Model/skill vocabulary is only checked when a registry is supplied.
pub fn validate_trajectory(doc: &TrajectoryDoc, registry: Option<&PoolRegistry>) -> ValidationReport {
    let mut out = Vec::new();

    if doc.final_answers.len() != 1 {
        out.push(violation(
            ViolationCode::SingleFinalAnswer,
            "trajectory".into(),
            format!("expected exactly one <final_answer>, found {}", doc.final_answers.len()),
        ));
    }

    let mut prev_round = 0u32;
    let mut declared: BTreeSet<u32> = BTreeSet::new();
    let mut edges: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    let mut dag_flagged = false;

    for (ti, turn) in doc.turns.iter().enumerate() {
        let loc = format!("turn {}", ti + 1);
        if turn.round <= prev_round {
            out.push(violation(
                ViolationCode::MonotoneRounds,
                loc.clone(),
                format!("round {} does not exceed previous round {}", turn.round, prev_round),
            ));
        } else if turn.plan.is_none() && turn.round != prev_round + 1 {
            out.push(violation(
                ViolationCode::ImplicitRound,
                loc.clone(),
                format!("plan-less turn must take round {}, has {}", prev_round + 1, turn.round),
            ));
        }
        prev_round = prev_round.max(turn.round);

        match &turn.plan {
            Some(plan) => {
                for sub in &plan.subtasks {
                    if !declared.insert(sub.id) {
                        out.push(violation(
                            ViolationCode::DuplicateSubtask,
                            format!("{loc} subtask {}", sub.id),
                            format!("subtask id {} declared more than once", sub.id),
                        ));
                        continue;
                    }
                    edges.insert(sub.id, sub.depends_on.clone());
                }
            }
            None => {
                if turn.routes.len() != 1 {
                    out.push(violation(
                        ViolationCode::ImplicitPlanArity,
                        loc.clone(),
                        format!("plan-less turn carries {} routes", turn.routes.len()),
                    ));
                }
                if let Some(route) = turn.routes.first() {
                    if !declared.insert(route.subtask_id) {
                        out.push(violation(
                            ViolationCode::DuplicateSubtask,
                            format!("{loc} route {}", route.subtask_id),
                            format!("subtask id {} declared more than once", route.subtask_id),
                        ));
                    } else {
                        edges.insert(route.subtask_id, BTreeSet::new());
                    }
                }
            }
        }

        let turn_ids = turn.declared_ids();
        let mut routed = BTreeSet::new();
        for route in &turn.routes {
            let rloc = format!("{loc} route {}", route.subtask_id);
            if !turn_ids.contains(&route.subtask_id) {
                out.push(violation(
                    ViolationCode::UndeclaredSubtask,
                    rloc.clone(),
                    format!("route targets subtask {} not declared in this turn", route.subtask_id),
                ));
            }
            if !routed.insert(route.subtask_id) && turn.plan.is_some() {
                out.push(violation(
                    ViolationCode::DuplicateRoute,
                    rloc.clone(),
                    format!("subtask {} routed twice", route.subtask_id),
                ));
            }
            if !route.nested.is_empty() {
                out.push(violation(
                    ViolationCode::NoNestedRoute,
                    rloc.clone(),
                    format!("{} route(s) nested inside this route", route.nested.len()),
                ));
            }
            if let Some(reg) = registry {
                if let Some(problem) = reg.vocabulary_problem(&route.model, &route.skill) {
                    out.push(violation(ViolationCode::ClosedVocabulary, rloc, problem));
                }
            }
        }
    }

    // Ordering rule: every id is strictly larger than each of its dependencies.
    for (id, deps) in &edges {
        for dep in deps {
            if dep >= id {
                out.push(violation(
                    ViolationCode::DagAcyclic,
                    format!("subtask {id}"),
                    format!("depends_on {dep} is not smaller than id {id}"),
                ));
                dag_flagged = true;
            } else if !edges.contains_key(dep) {
                out.push(violation(
                    ViolationCode::UnknownDependency,
                    format!("subtask {id}"),
                    format!("depends_on {dep} names no declared subtask"),
                ));
            }
        }
    }
    if !dag_flagged && has_cycle(&edges) {
        out.push(violation(
            ViolationCode::DagAcyclic,
            "trajectory".into(),
            "depends_on edges contain a cycle".into(),
        ));
    }

    ValidationReport::from_violations(out)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn escape_text(raw: &str) -> String {
    quick_xml::escape::partial_escape(raw).into_owned()
}

fn escape_attr(raw: &str) -> String {
    quick_xml::escape::escape(raw).into_owned()
}

pub(crate) fn join_ids(ids: &BTreeSet<u32>) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn write_plan(out: &mut String, round: u32, plan: &PlanBlock) {
    out.push_str(&format!("<plan round=\"{round}\">\n"));
    for sub in &plan.subtasks {
        out.push_str(&format!(
            "<subtask id=\"{}\" depends_on=\"{}\">{}</subtask>\n",
            sub.id,
            join_ids(&sub.depends_on),
            escape_text(&sub.description)
        ));
    }
    out.push_str("</plan>\n");
}

pub(crate) fn write_route(out: &mut String, route: &RouteBlock, payload: &str) {
    out.push_str(&format!(
        "<route subtask=\"{}\" model=\"{}\" skill=\"{}\">{}</route>\n",
        route.subtask_id,
        escape_attr(&route.model),
        escape_attr(&route.skill),
        escape_text(payload)
    ));
}

pub(crate) fn write_obs(out: &mut String, subtask_id: u32, body: &str) {
    out.push_str(&format!(
        "<obs subtask=\"{}\">{}</obs>\n",
        subtask_id,
        escape_text(body)
    ));
}

pub(crate) fn write_verify(out: &mut String, body: &str, replan: bool) {
    out.push_str(&format!(
        "<verify>{}{}</verify>\n",
        escape_text(body),
        if replan { "<replan/>" } else { "" }
    ));
}

pub(crate) fn write_query(out: &mut String, query: &str) {
    out.push_str(&format!("<query>{}</query>\n", escape_text(query)));
}

fn write_doc(doc: &TrajectoryDoc) -> String {
    let mut out = String::from("<trajectory>\n");
    write_query(&mut out, &doc.query);
    for turn in &doc.turns {
        if let Some(plan) = &turn.plan {
            write_plan(&mut out, turn.round, plan);
        }
        for route in &turn.routes {
            write_route(&mut out, route, &route.payload);
        }
        for obs in &turn.observations {
            write_obs(&mut out, obs.subtask_id, &obs.body);
        }
        if let Some(v) = &turn.verify {
            write_verify(&mut out, &v.body, v.replan);
        }
    }
    for answer in &doc.final_answers {
        out.push_str(&format!("<final_answer>{}</final_answer>\n", escape_text(answer)));
    }
    out.push_str("</trajectory>\n");
    out
}

/// Canonical byte form of a valid document.
///
/// Fixed attribute order (`id, depends_on` / `subtask, model, skill`), one
/// block per line, `depends_on` as ascending comma-separated ids.
pub fn serialize_trajectory(doc: &TrajectoryDoc) -> Result<String, GrammarError> {
    let report = validate_trajectory(doc, None);
    if !report.valid {
        return Err(GrammarError::InvalidDoc(report));
    }
    Ok(write_doc(doc))
}

// ---------------------------------------------------------------------------
// Behaviour classification
// ---------------------------------------------------------------------------

/// Assigns one of the four behaviour modes.
///
/// * `lazy`: no plan at all, explicit or implicit (zero turns);
/// * `decomp_repair`: a verify requests a replan and a later turn opens an
///   explicit plan;
/// * `oneshot`: a single turn;
/// * `continuation`: everything else (several rounds, no repair).
pub fn classify_behaviour(doc: &TrajectoryDoc) -> Result<Behaviour, GrammarError> {
    let report = validate_trajectory(doc, None);
    if !report.valid {
        return Err(GrammarError::Unclassifiable(report));
    }
    if doc.turns.is_empty() {
        return Ok(Behaviour::Lazy);
    }
    let repaired = doc.turns.iter().enumerate().any(|(i, turn)| {
        turn.verify.as_ref().is_some_and(|v| v.replan) && doc.turns[i + 1..].iter().any(|later| later.plan.is_some())
    });
    if repaired {
        return Ok(Behaviour::DecompRepair);
    }
    if doc.turns.len() == 1 {
        return Ok(Behaviour::Oneshot);
    }
    Ok(Behaviour::Continuation)
}

// ---------------------------------------------------------------------------
// Corpus ingestion
// ---------------------------------------------------------------------------

pub const TRAJECTORY_EXTENSION: &str = ".traj.xml";
pub const STREAM_SEPARATOR: &str = "===";

/// One document pulled from a corpus, labelled by where it came from.
#[derive(Debug)]
pub struct CorpusEntry {
    pub source: String,
    pub raw: String,
}

/// Splits a concatenated stream on lines consisting only of `===`.
pub fn split_stream(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current = String::new();
    for line in text.split_inclusive('\n') {
        if line.trim_end_matches(['\r', '\n']).trim() == STREAM_SEPARATOR {
            if !current.trim().is_empty() {
                docs.push(std::mem::take(&mut current));
            }
            current.clear();
        } else {
            current.push_str(line);
        }
    }
    if !current.trim().is_empty() {
        docs.push(current);
    }
    docs
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(TRAJECTORY_EXTENSION))
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Reads a directory tree of `.traj.xml` files (sorted by path) or a single
/// file, which may be a `===`-separated stream.
pub fn read_corpus(path: &Path) -> std::io::Result<Vec<CorpusEntry>> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files
            .into_iter()
            .map(|f| {
                Ok(CorpusEntry {
                    source: f.display().to_string(),
                    raw: std::fs::read_to_string(&f)?,
                })
            })
            .collect()
    } else {
        let text = std::fs::read_to_string(path)?;
        Ok(split_stream(&text)
            .into_iter()
            .enumerate()
            .map(|(i, raw)| CorpusEntry {
                source: format!("{}#{}", path.display(), i),
                raw,
            })
            .collect())
    }
}

/// Label counts over a corpus, in the fixed mode order.
pub fn behaviour_frequencies(labels: &[Behaviour]) -> BTreeMap<Behaviour, usize> {
    let mut counts: BTreeMap<Behaviour, usize> = Behaviour::ALL.iter().map(|b| (*b, 0)).collect();
    for label in labels {
        *counts.entry(*label).or_default() += 1;
    }
    counts
}
