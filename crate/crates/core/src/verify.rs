//! Source-specific verifiers producing the binary correctness signal b.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("qa threshold {0} is outside [0, 1]")]
    Threshold(f64),
    #[error("gold aux for {kind} is malformed: {message}")]
    Aux { kind: &'static str, message: String },
    #[error("gold file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldKind {
    Math,
    Qa,
    Code,
    ToolSchema,
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldSpec {
    pub kind: GoldKind,
    #[serde(default)]
    pub gold: String,
    /// Test harness for code, expected schema for tool use.
    #[serde(default)]
    pub aux: serde_json::Value,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl GoldSpec {
    pub fn new(kind: GoldKind, gold: &str) -> Self {
        Self {
            kind,
            gold: gold.to_string(),
            aux: serde_json::Value::Null,
            threshold: default_threshold(),
        }
    }

    pub fn validate(&self) -> Result<(), VerifyError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(VerifyError::Threshold(self.threshold));
        }
        match self.kind {
            GoldKind::Code => CodeHarness::from_aux(&self.aux).map(|_| ()),
            GoldKind::ToolSchema => ToolSchema::from_aux(&self.aux).map(|_| ()),
            _ => Ok(()),
        }
    }
}

/// One line of a gold file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub task_id: String,
    #[serde(flatten)]
    pub spec: GoldSpec,
}

/// Reads line-delimited gold records, validating each.
pub fn load_gold(text: &str) -> Result<Vec<GoldRecord>, VerifyError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let rec: GoldRecord = serde_json::from_str(line).map_err(|e| VerifyError::Parse(e.to_string()))?;
            rec.spec.validate()?;
            Ok(rec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub b: bool,
    pub score: f64,
    pub detail: String,
    /// The check itself could not run; keep the sample out of curriculum gating.
    #[serde(default)]
    pub infra: bool,
}

impl Verdict {
    fn binary(b: bool, detail: &str) -> Self {
        Self {
            b,
            score: if b { 1.0 } else { 0.0 },
            detail: detail.to_string(),
            infra: false,
        }
    }
}

/// How a QA answer is scored before thresholding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaScoring {
    #[default]
    MaxEmF1,
    F1Only,
}

/// Dispatches on the gold kind.
pub fn verify(answer: &str, gold: &GoldSpec, qa: QaScoring) -> Verdict {
    match gold.kind {
        GoldKind::Math => verify_math(answer, &gold.gold),
        GoldKind::Qa => verify_qa_with(answer, &gold.gold, gold.threshold, qa),
        GoldKind::Code => match CodeHarness::from_aux(&gold.aux) {
            Ok(h) => verify_code_tests(answer, &h),
            Err(e) => Verdict {
                infra: true,
                ..Verdict::binary(false, &format!("infra: {e}"))
            },
        },
        GoldKind::ToolSchema => match ToolSchema::from_aux(&gold.aux) {
            Ok(s) => verify_schema_match(answer, &s),
            Err(e) => Verdict::binary(false, &format!("schema: {e}")),
        },
    }
}

// ---------------------------------------------------------------------------
// Math
// ---------------------------------------------------------------------------

type Monomial = Vec<(String, u32)>;

/// Polynomial with exact rational coefficients, zero terms removed.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Poly(BTreeMap<Monomial, BigRational>);

impl Poly {
    fn constant(c: BigRational) -> Self {
        let mut m = BTreeMap::new();
        if !c.is_zero() {
            m.insert(Vec::new(), c);
        }
        Poly(m)
    }

    fn var(name: &str) -> Self {
        Poly(BTreeMap::from([(vec![(name.to_string(), 1)], BigRational::one())]))
    }

    fn as_constant(&self) -> Option<BigRational> {
        match self.0.len() {
            0 => Some(BigRational::zero()),
            1 => self.0.get(&Vec::new()).cloned(),
            _ => None,
        }
    }

    fn add(mut self, other: &Poly) -> Poly {
        for (m, c) in &other.0 {
            let entry = self.0.entry(m.clone()).or_insert_with(BigRational::zero);
            *entry += c;
            if entry.is_zero() {
                self.0.remove(m);
            }
        }
        self
    }

    fn scale(&self, k: &BigRational) -> Poly {
        if k.is_zero() {
            return Poly(BTreeMap::new());
        }
        Poly(self.0.iter().map(|(m, c)| (m.clone(), c * k)).collect())
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly(BTreeMap::new());
        for (m1, c1) in &self.0 {
            for (m2, c2) in &other.0 {
                let mut powers: BTreeMap<String, u32> = m1.iter().cloned().collect();
                for (v, e) in m2 {
                    *powers.entry(v.clone()).or_insert(0) += e;
                }
                let term = Poly(BTreeMap::from([(powers.into_iter().collect(), c1 * c2)]));
                out = out.add(&term);
            }
        }
        out
    }

    fn pow(&self, exp: u32) -> Poly {
        let mut acc = Poly::constant(BigRational::one());
        for _ in 0..exp {
            acc = acc.mul(self);
        }
        acc
    }

    /// True when `other = k·self` for some nonzero rational k.
    fn proportional(&self, other: &Poly) -> bool {
        match (self.0.iter().next_back(), other.0.is_empty()) {
            (None, empty) => empty,
            (Some((lead, c)), _) => match other.0.get(lead) {
                Some(d) => &self.scale(&(d / c)) == other,
                None => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(BigRational),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Option<Vec<Tok>> {
    let src = src
        .replace("\\cdot", "*")
        .replace("\\times", "*")
        .replace("\\div", "/")
        .replace(['×', '·'], "*")
        .replace('÷', "/")
        .replace('−', "-");
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() || c == '$' {
            i += 1;
        } else if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            out.push(Tok::Num(parse_decimal(&chars[start..i].iter().collect::<String>())?));
        } else if c.is_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_alphabetic() {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^()=".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return None;
        }
    }
    Some(out)
}

fn parse_decimal(text: &str) -> Option<BigRational> {
    let (int, frac) = match text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (text, ""),
    };
    if frac.contains('.') || (int.is_empty() && frac.is_empty()) {
        return None;
    }
    let digits = format!("{int}{frac}");
    let numer: BigInt = digits.parse().ok()?;
    let denom = num_traits::pow(BigInt::from(10), frac.len());
    Some(BigRational::new(numer, denom))
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Option<Poly> {
        let mut acc = self.term()?;
        loop {
            if self.eat('+') {
                acc = acc.add(&self.term()?);
            } else if self.eat('-') {
                acc = acc.add(&self.term()?.scale(&-BigRational::one()));
            } else {
                return Some(acc);
            }
        }
    }

    fn starts_factor(&self) -> bool {
        matches!(
            self.peek(),
            Some(Tok::Num(_)) | Some(Tok::Ident(_)) | Some(Tok::Op('('))
        )
    }

    fn term(&mut self) -> Option<Poly> {
        let mut acc = self.unary()?;
        loop {
            if self.eat('*') {
                acc = acc.mul(&self.unary()?);
            } else if self.eat('/') {
                let divisor = self.unary()?.as_constant()?;
                if divisor.is_zero() {
                    return None;
                }
                acc = acc.scale(&divisor.recip());
            } else if self.starts_factor() {
                acc = acc.mul(&self.power()?);
            } else {
                return Some(acc);
            }
        }
    }

    fn unary(&mut self) -> Option<Poly> {
        if self.eat('-') {
            Some(self.unary()?.scale(&-BigRational::one()))
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Option<Poly> {
        let base = self.primary()?;
        if !self.eat('^') {
            return Some(base);
        }
        let exp = self.unary()?.as_constant()?;
        if !exp.is_integer() {
            return None;
        }
        let e = exp.to_integer();
        let mag: u32 = e.abs().try_into().ok().filter(|m| *m <= 64)?;
        if e.is_negative() {
            let c = base.as_constant().filter(|c| !c.is_zero())?;
            Some(Poly::constant(num_traits::pow(c.recip(), mag as usize)))
        } else {
            Some(base.pow(mag))
        }
    }

    fn primary(&mut self) -> Option<Poly> {
        match self.peek()?.clone() {
            Tok::Num(n) => {
                self.pos += 1;
                Some(Poly::constant(n))
            }
            Tok::Ident(name) => {
                self.pos += 1;
                // function application is outside the decidable fragment
                if self.peek() == Some(&Tok::Op('(')) {
                    return None;
                }
                Some(Poly::var(&name))
            }
            Tok::Op('(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.eat(')').then_some(inner)
            }
            Tok::Op(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum MathForm {
    Expr(Poly),
    /// lhs − rhs, compared up to a nonzero scalar.
    Equation(Poly),
}

fn parse_math(src: &str) -> Option<MathForm> {
    let toks = tokenize(src)?;
    if toks.is_empty() {
        return None;
    }
    let mut p = Parser { toks, pos: 0 };
    let lhs = p.expr()?;
    let form = if p.eat('=') {
        let rhs = p.expr()?;
        MathForm::Equation(lhs.add(&rhs.scale(&-BigRational::one())))
    } else {
        MathForm::Expr(lhs)
    };
    (p.pos == p.toks.len()).then_some(form)
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace() && *c != '$').collect()
}

/// Exact comparison of rational expressions and polynomials; equations are
/// equal when one side difference is a nonzero multiple of the other.
pub fn verify_math(answer: &str, gold: &str) -> Verdict {
    match (parse_math(answer), parse_math(gold)) {
        (Some(MathForm::Expr(a)), Some(MathForm::Expr(g))) => Verdict::binary(a == g, "exact"),
        (Some(MathForm::Equation(a)), Some(MathForm::Equation(g))) => Verdict::binary(a.proportional(&g), "equation"),
        (Some(_), Some(_)) => Verdict::binary(false, "shape"),
        _ => {
            if !squash(answer).is_empty() && squash(answer) == squash(gold) {
                Verdict::binary(true, "fallback")
            } else {
                Verdict::binary(false, "parse")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// QA
// ---------------------------------------------------------------------------

/// Lowercase, drop punctuation and articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// (EM, token F1) after normalization.
pub fn em_f1(answer: &str, gold: &str) -> (f64, f64) {
    let a = normalize_answer(answer);
    let g = normalize_answer(gold);
    let em = if a == g { 1.0 } else { 0.0 };
    let at: Vec<&str> = a.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if at.is_empty() || gt.is_empty() {
        return (em, em);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &at {
        if let Some(n) = counts.get_mut(t).filter(|n| **n > 0) {
            *n -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return (em, 0.0);
    }
    let precision = common as f64 / at.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    (em, 2.0 * precision * recall / (precision + recall))
}

pub fn verify_qa_em_f1(answer: &str, gold: &str, threshold: f64) -> Verdict {
    verify_qa_with(answer, gold, threshold, QaScoring::MaxEmF1)
}

pub fn verify_qa_with(answer: &str, gold: &str, threshold: f64, scoring: QaScoring) -> Verdict {
    let (em, f1) = em_f1(answer, gold);
    let score = match scoring {
        QaScoring::MaxEmF1 => em.max(f1),
        QaScoring::F1Only => f1,
    };
    Verdict {
        b: score >= threshold,
        score,
        detail: format!("em={em} f1={f1:.6}"),
        infra: false,
    }
}

// ---------------------------------------------------------------------------
// Code
// ---------------------------------------------------------------------------

fn default_code_timeout_ms() -> u64 {
    5000
}

/// External check command. It runs under `sh -c` in a fresh temp directory
/// with the artifact path in `ORCHESTRA_ARTIFACT`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeHarness {
    pub command: String,
    #[serde(default = "default_code_timeout_ms")]
    pub timeout_ms: u64,
}

impl CodeHarness {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            timeout_ms: default_code_timeout_ms(),
        }
    }

    pub fn from_aux(aux: &serde_json::Value) -> Result<Self, VerifyError> {
        serde_json::from_value(aux.clone()).map_err(|e| VerifyError::Aux {
            kind: "code",
            message: e.to_string(),
        })
    }
}

fn infra(detail: &str) -> Verdict {
    Verdict {
        infra: true,
        ..Verdict::binary(false, detail)
    }
}

fn kill_group(pid: u32) {
    // SAFETY: signalling a process group we created; no memory is touched.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

pub fn verify_code_tests(artifact: &str, harness: &CodeHarness) -> Verdict {
    let Ok(dir) = tempfile::tempdir() else {
        return infra("infra: temp dir");
    };
    let path = dir.path().join("artifact");
    let written = std::fs::File::create(&path).and_then(|mut f| f.write_all(artifact.as_bytes()));
    if written.is_err() {
        return infra("infra: artifact write");
    }
    let child = Command::new("sh")
        .arg("-c")
        .arg(&harness.command)
        .current_dir(dir.path())
        .env("ORCHESTRA_ARTIFACT", &path)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .process_group(0)
        .spawn();
    let Ok(mut child) = child else {
        return infra("infra: spawn");
    };
    let deadline = Instant::now() + Duration::from_millis(harness.timeout_ms);
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                return match status.code() {
                    Some(0) => Verdict::binary(true, "pass"),
                    // sh reports a missing or non-executable check this way
                    Some(126) | Some(127) => infra("infra: harness unavailable"),
                    _ => Verdict::binary(false, "fail"),
                };
            }
            Ok(None) if Instant::now() >= deadline => {
                kill_group(child.id());
                let _ = child.wait();
                return Verdict::binary(false, "timeout");
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(_) => {
                kill_group(child.id());
                return infra("infra: wait");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tool schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    #[serde(alias = "string")]
    Text,
    Number,
    Integer,
    Boolean,
    Object,
    Array,
    Null,
}

impl FieldType {
    fn accepts(self, v: &serde_json::Value) -> bool {
        use serde_json::Value as V;
        match self {
            FieldType::Text => v.is_string(),
            FieldType::Number => v.is_number(),
            FieldType::Integer => v.is_i64() || v.is_u64(),
            FieldType::Boolean => v.is_boolean(),
            FieldType::Object => matches!(v, V::Object(_)),
            FieldType::Array => v.is_array(),
            FieldType::Null => v.is_null(),
        }
    }
}

/// Required top-level fields and their primitive types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub required: BTreeMap<String, FieldType>,
}

impl ToolSchema {
    pub fn from_aux(aux: &serde_json::Value) -> Result<Self, VerifyError> {
        serde_json::from_value(aux.clone()).map_err(|e| VerifyError::Aux {
            kind: "tool_schema",
            message: e.to_string(),
        })
    }
}

pub fn verify_schema_match(answer: &str, schema: &ToolSchema) -> Verdict {
    let Ok(serde_json::Value::Object(obj)) = serde_json::from_str::<serde_json::Value>(answer.trim()) else {
        return Verdict::binary(false, "parse");
    };
    for (field, ty) in &schema.required {
        match obj.get(field) {
            None => return Verdict::binary(false, &format!("missing {field}")),
            Some(v) if !ty.accepts(v) => return Verdict::binary(false, &format!("type {field}")),
            Some(_) => {}
        }
    }
    Verdict::binary(true, "match")
}
