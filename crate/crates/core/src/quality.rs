//! Result quality assessment and the correction loop.
//!
//! Quality is a weighted mean of five per-principle ratios, discounted by an
//! estimating-entropy term. Unqualified results go through reason inference
//! over the problem-causes library (shallow causes refined into deep ones by
//! a weighted rule table), the reason-to-operation mapping table, and
//! finally the correction operations themselves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::agents::{
    AgentError, AgentRef, AgentStore, Amount, FieldPath, Mutation, MutationAction, MutationRecord, TaskAgent,
};
use crate::config::{MutationSteps, PruneConfig, QualityConfig};
use crate::scheduler::BoostDirection;
use crate::task::{PhaseEvent, TaskError, TaskPhase, TaskTable, Tid, UserId};

pub const PRINCIPLES: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("score {index} must satisfy 0 <= S <= cap and cap > 0")]
    InvalidScores { index: usize },
    #[error("weights must be non-negative and sum to 1, sum is {0}")]
    WeightSumViolation(f64),
    #[error("description clarity must be positive")]
    NonPositiveUpsilon,
    #[error("additional-information demand must be non-negative")]
    NegativeLambda,
    #[error("no known shallow cause in feedback: {0}")]
    UnknownShallowCause(String),
    #[error("reason {0} has no mapping")]
    UnmappedReason(Rn),
    #[error("reason list is empty")]
    EmptyReasons,
    #[error("unknown correction operation {0}")]
    UnknownOperation(On),
    #[error("parent {0} not found")]
    ParentNotFound(Rn),
    #[error("reason {0} already exists")]
    DuplicateRn(Rn),
    #[error("reason {0} is referenced by the mapping table")]
    ProtectedNode(Rn),
    #[error("reason {0} is not prunable")]
    NotPrunable(Rn),
    #[error("deep reason {0} needs a parent")]
    OrphanDeepNode(Rn),
    #[error("quality {last_q:.4} still below threshold after {rounds} rounds")]
    MaxRoundsExceeded { rounds: u32, last_q: f64 },
    #[error("a feedback loop is already running for {0}")]
    LoopBusy(Tid),
    #[error("bad fixture: {0}")]
    Fixture(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Per-principle scores, in fixed order: content relevance, format
/// correctness, non-redundancy, completeness, submission speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub scores: [f64; PRINCIPLES],
    pub caps: [f64; PRINCIPLES],
}

impl QualityScores {
    pub fn new(scores: [f64; PRINCIPLES], caps: [f64; PRINCIPLES]) -> Result<Self, QualityError> {
        let s = QualityScores { scores, caps };
        s.validate()?;
        Ok(s)
    }

    /// Scores already expressed as ratios (caps of 1).
    pub fn from_ratios(xi: [f64; PRINCIPLES]) -> Result<Self, QualityError> {
        QualityScores::new(xi, [1.0; PRINCIPLES])
    }

    pub fn validate(&self) -> Result<(), QualityError> {
        for k in 0..PRINCIPLES {
            let (s, cap) = (self.scores[k], self.caps[k]);
            if !(cap > 0.0 && cap.is_finite() && s >= 0.0 && s <= cap) {
                return Err(QualityError::InvalidScores { index: k });
            }
        }
        Ok(())
    }

    pub fn ratios(&self) -> [f64; PRINCIPLES] {
        std::array::from_fn(|k| self.scores[k] / self.caps[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Weights(pub [f64; PRINCIPLES]);

impl Weights {
    pub const UNIFORM: Weights = Weights([0.2; PRINCIPLES]);

    pub fn new(w: [f64; PRINCIPLES]) -> Result<Self, QualityError> {
        let weights = Weights(w);
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<(), QualityError> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(QualityError::WeightSumViolation(sum));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyInputs {
    /// Amount of additional information the evaluator needs.
    pub lambda: f64,
    /// Accuracy/clarity of the task description.
    pub upsilon: f64,
}

/// `E = F(lambda / upsilon)` with `F(x) = 1 / (1 + e^(-ln x))`, and
/// `F(0) = 0`.
pub fn estimating_entropy(inp: EntropyInputs) -> Result<f64, QualityError> {
    if !(inp.upsilon > 0.0 && inp.upsilon.is_finite()) {
        return Err(QualityError::NonPositiveUpsilon);
    }
    if !(inp.lambda >= 0.0 && inp.lambda.is_finite()) {
        return Err(QualityError::NegativeLambda);
    }
    let x = inp.lambda / inp.upsilon;
    if x == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 / (1.0 + (-x.ln()).exp()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssessmentLevel {
    Overall,
    PerParticipant(UserId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Qualified,
    Unqualified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub task_id: Tid,
    pub q: f64,
    pub delta: f64,
    pub verdict: Verdict,
    pub level: AssessmentLevel,
}

/// `Q = sum(xi_k * w_k) / (1 + E)`.
pub fn quality(scores: &QualityScores, weights: &Weights, entropy: f64) -> Result<f64, QualityError> {
    scores.validate()?;
    weights.validate()?;
    let xi = scores.ratios();
    let numerator: f64 = xi.iter().zip(weights.0.iter()).map(|(x, w)| x * w).sum();
    Ok(numerator / (1.0 + entropy))
}

pub fn assess(
    task_id: Tid,
    scores: &QualityScores,
    weights: &Weights,
    entropy: f64,
    delta: f64,
    level: AssessmentLevel,
) -> Result<QualityReport, QualityError> {
    let q = quality(scores, weights, entropy)?;
    let verdict = if q >= delta { Verdict::Qualified } else { Verdict::Unqualified };
    Ok(QualityReport { task_id, q, delta, verdict, level })
}

// ---------------------------------------------------------------------------
// Codes

/// Reason number, written as hex (`0x02`, `0x1001`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rn(pub u32);

impl fmt::Display for Rn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 < 0x100 {
            write!(f, "0x{:02X}", self.0)
        } else {
            write!(f, "0x{:04X}", self.0)
        }
    }
}

impl FromStr for Rn {
    type Err = QualityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let hex = s.trim().strip_prefix("0x").or_else(|| s.trim().strip_prefix("0X"));
        hex.and_then(|h| u32::from_str_radix(h, 16).ok())
            .map(Rn)
            .ok_or_else(|| QualityError::Fixture(format!("bad reason number `{s}`")))
    }
}

/// Operation number, written `No.<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct On(pub u32);

impl fmt::Display for On {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "No.{}", self.0)
    }
}

impl FromStr for On {
    type Err = QualityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .strip_prefix("No.")
            .and_then(|n| n.parse().ok())
            .map(On)
            .ok_or_else(|| QualityError::Fixture(format!("bad operation number `{s}`")))
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }
        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}
string_serde!(Rn);
string_serde!(On);

// ---------------------------------------------------------------------------
// Problem causes library

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Depth {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonNode {
    pub rn: Rn,
    pub phrase: String,
    pub depth: Depth,
    #[serde(default)]
    pub parent: Option<Rn>,
    #[serde(default, skip_deserializing)]
    pub children: Vec<Rn>,
    /// Words in feedback text that point at this cause.
    #[serde(default)]
    pub cues: Vec<String>,
    #[serde(default)]
    pub retrieval_count: u64,
    #[serde(default)]
    pub last_retrieved: u64,
    #[serde(default)]
    pub created_at: u64,
}

impl ReasonNode {
    pub fn new(rn: Rn, phrase: impl Into<String>, depth: Depth, parent: Option<Rn>) -> Self {
        ReasonNode {
            rn,
            phrase: phrase.into(),
            depth,
            parent,
            children: Vec::new(),
            cues: Vec::new(),
            retrieval_count: 0,
            last_retrieved: 0,
            created_at: 0,
        }
    }
}

/// The problem causes library, organised as a reason decision tree whose
/// implicit root has the shallow causes as children.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Pcl {
    nodes: BTreeMap<Rn, ReasonNode>,
}

impl Pcl {
    pub fn from_nodes(nodes: Vec<ReasonNode>) -> Result<Self, QualityError> {
        let mut pcl = Pcl::default();
        let (shallow, deep): (Vec<_>, Vec<_>) = nodes.into_iter().partition(|n| n.depth == Depth::Shallow);
        for n in shallow {
            pcl.add_node(n)?;
        }
        // deep nodes may hang off other deep nodes; insert parents first
        let mut pending = deep;
        while !pending.is_empty() {
            let before = pending.len();
            let mut rest = Vec::new();
            for n in pending {
                if n.parent.is_some_and(|p| pcl.nodes.contains_key(&p)) {
                    pcl.add_node(n)?;
                } else {
                    rest.push(n);
                }
            }
            if rest.len() == before {
                let n = &rest[0];
                return Err(match n.parent {
                    Some(p) => QualityError::ParentNotFound(p),
                    None => QualityError::OrphanDeepNode(n.rn),
                });
            }
            pending = rest;
        }
        Ok(pcl)
    }

    pub fn from_json(text: &str) -> Result<Self, QualityError> {
        let nodes: Vec<ReasonNode> = serde_json::from_str(text).map_err(|e| QualityError::Fixture(e.to_string()))?;
        Pcl::from_nodes(nodes)
    }

    pub fn get(&self, rn: Rn) -> Option<&ReasonNode> {
        self.nodes.get(&rn)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ReasonNode> {
        self.nodes.values()
    }

    pub fn shallow(&self) -> impl Iterator<Item = &ReasonNode> {
        self.nodes.values().filter(|n| n.depth == Depth::Shallow)
    }

    pub fn add_node(&mut self, mut node: ReasonNode) -> Result<(), QualityError> {
        if self.nodes.contains_key(&node.rn) {
            return Err(QualityError::DuplicateRn(node.rn));
        }
        match (node.depth, node.parent) {
            (Depth::Deep, None) => return Err(QualityError::OrphanDeepNode(node.rn)),
            (Depth::Shallow, Some(_)) => node.parent = None,
            _ => {}
        }
        if let Some(p) = node.parent {
            let parent = self.nodes.get_mut(&p).ok_or(QualityError::ParentNotFound(p))?;
            parent.children.push(node.rn);
            parent.children.sort();
        }
        node.children.clear();
        self.nodes.insert(node.rn, node);
        Ok(())
    }

    fn touch(&mut self, rn: Rn, now: u64) {
        if let Some(n) = self.nodes.get_mut(&rn) {
            n.retrieval_count += 1;
            n.last_retrieved = now;
        }
    }

    fn is_stale(&self, node: &ReasonNode, now: u64, policy: &PruneConfig) -> bool {
        let last = node.last_retrieved.max(node.created_at);
        node.children.is_empty()
            && node.retrieval_count < policy.max_retrievals
            && now.saturating_sub(last) > policy.min_age
    }

    /// Removes a stale leaf. Nodes referenced by the mapping table are never
    /// removed.
    pub fn prune(&mut self, rn: Rn, now: u64, rsmt: &Rsmt, policy: &PruneConfig) -> Result<ReasonNode, QualityError> {
        let node = self.nodes.get(&rn).ok_or(QualityError::NotPrunable(rn))?;
        if rsmt.references(rn) {
            return Err(QualityError::ProtectedNode(rn));
        }
        if !self.is_stale(node, now, policy) {
            return Err(QualityError::NotPrunable(rn));
        }
        let node = self.nodes.remove(&rn).expect("checked");
        if let Some(p) = node.parent.and_then(|p| self.nodes.get_mut(&p)) {
            p.children.retain(|c| *c != rn);
        }
        Ok(node)
    }

    /// Maintenance sweep: prunes every stale, unprotected leaf.
    pub fn prune_stale(&mut self, now: u64, rsmt: &Rsmt, policy: &PruneConfig) -> Vec<Rn> {
        let mut removed = Vec::new();
        loop {
            let candidates: Vec<Rn> = self
                .nodes
                .values()
                .filter(|n| !rsmt.references(n.rn) && self.is_stale(n, now, policy))
                .map(|n| n.rn)
                .collect();
            if candidates.is_empty() {
                return removed;
            }
            for rn in candidates {
                if self.prune(rn, now, rsmt, policy).is_ok() {
                    removed.push(rn);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RdtOp {
    AddNode(ReasonNode),
    Prune(Rn),
}

pub fn update_rdt(pcl: &mut Pcl, op: RdtOp, rsmt: &Rsmt, policy: &PruneConfig, now: u64) -> Result<(), QualityError> {
    match op {
        RdtOp::AddNode(mut n) => {
            n.created_at = n.created_at.max(now);
            pcl.add_node(n)
        }
        RdtOp::Prune(rn) => pcl.prune(rn, now, rsmt, policy).map(|_| ()),
    }
}

// ---------------------------------------------------------------------------
// Correction operation library

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpStep {
    Mutate { field: FieldPath, action: MutationAction },
    SwitchPhase(TaskPhase),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationDescriptor {
    /// Literal descriptor, e.g. `M->Task-agent.range` or `PS->Generated state`.
    pub descriptor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<MutationAction>,
}

impl OperationDescriptor {
    pub fn step(&self) -> Result<OpStep, QualityError> {
        let d = self.descriptor.trim();
        if let Some(state) = d.strip_prefix("PS->") {
            let phase = match state.trim() {
                "Generated state" | "Generation state" => TaskPhase::Generation,
                "Assignment state" | "Allocation state" => TaskPhase::Allocation,
                "Processing state" => TaskPhase::Processing,
                other => return Err(QualityError::Fixture(format!("unknown phase switch `{other}`"))),
            };
            return Ok(OpStep::SwitchPhase(phase));
        }
        if let Some(path) = d.strip_prefix("M->") {
            let field: FieldPath = path.trim().parse()?;
            let action = self.action.ok_or_else(|| QualityError::Fixture(format!("mutation `{d}` needs an action")))?;
            return Ok(OpStep::Mutate { field, action });
        }
        Err(QualityError::Fixture(format!("unknown operation descriptor `{d}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOp {
    pub on: On,
    pub revision: String,
    pub operations: Vec<OperationDescriptor>,
}

impl CorrectionOp {
    pub fn steps(&self) -> Result<Vec<OpStep>, QualityError> {
        self.operations.iter().map(OperationDescriptor::step).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Scol {
    ops: BTreeMap<On, CorrectionOp>,
}

impl Scol {
    pub fn from_ops(ops: Vec<CorrectionOp>) -> Result<Self, QualityError> {
        let mut map = BTreeMap::new();
        for op in ops {
            op.steps()?;
            let on = op.on;
            if map.insert(on, op).is_some() {
                return Err(QualityError::Fixture(format!("duplicate operation {on}")));
            }
        }
        Ok(Scol { ops: map })
    }

    pub fn from_json(text: &str) -> Result<Self, QualityError> {
        Scol::from_ops(serde_json::from_str(text).map_err(|e| QualityError::Fixture(e.to_string()))?)
    }

    pub fn get(&self, on: On) -> Option<&CorrectionOp> {
        self.ops.get(&on)
    }

    pub fn ops(&self) -> impl Iterator<Item = &CorrectionOp> {
        self.ops.values()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsmtRow {
    pub rn: Rn,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub phrase: String,
    pub ons: Vec<On>,
}

/// Reason-to-operation mapping table.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Rsmt {
    rows: BTreeMap<Rn, Vec<On>>,
}

impl Rsmt {
    pub fn from_rows(rows: Vec<RsmtRow>) -> Result<Self, QualityError> {
        let mut map = BTreeMap::new();
        for row in rows {
            if map.insert(row.rn, row.ons).is_some() {
                return Err(QualityError::Fixture(format!("duplicate mapping for {}", row.rn)));
            }
        }
        Ok(Rsmt { rows: map })
    }

    pub fn from_json(text: &str) -> Result<Self, QualityError> {
        Rsmt::from_rows(serde_json::from_str(text).map_err(|e| QualityError::Fixture(e.to_string()))?)
    }

    pub fn get(&self, rn: Rn) -> Option<&[On]> {
        self.rows.get(&rn).map(Vec::as_slice)
    }

    pub fn references(&self, rn: Rn) -> bool {
        self.rows.contains_key(&rn)
    }

    pub fn rows(&self) -> impl Iterator<Item = (Rn, &[On])> {
        self.rows.iter().map(|(rn, ons)| (*rn, ons.as_slice()))
    }

    /// Every RN resolves in the library and every ON in the operation set.
    pub fn cross_check(&self, pcl: &Pcl, scol: &Scol) -> Result<(), QualityError> {
        for (rn, ons) in &self.rows {
            if pcl.get(*rn).is_none() {
                return Err(QualityError::UnmappedReason(*rn));
            }
            if let Some(on) = ons.iter().find(|on| scol.get(**on).is_none()) {
                return Err(QualityError::UnknownOperation(*on));
            }
        }
        Ok(())
    }
}

/// Concatenates the mapped operations in reason order, dropping repeats.
pub fn map_to_operations(rns: &[Rn], rsmt: &Rsmt) -> Result<Vec<On>, QualityError> {
    if rns.is_empty() {
        return Err(QualityError::EmptyReasons);
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for rn in rns {
        let ons = rsmt.get(*rn).ok_or(QualityError::UnmappedReason(*rn))?;
        for on in ons {
            if seen.insert(*on) {
                out.push(*on);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reason inference

/// One row of the shallow-to-deep scoring table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonRule {
    pub shallow: Rn,
    pub deep: Rn,
    pub feature: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReasonRules {
    pub rules: Vec<ReasonRule>,
    /// Feature name -> words in feedback text that raise it.
    #[serde(default)]
    pub feedback_cues: BTreeMap<String, Vec<String>>,
}

impl ReasonRules {
    pub fn from_json(text: &str) -> Result<Self, QualityError> {
        serde_json::from_str(text).map_err(|e| QualityError::Fixture(e.to_string()))
    }

    pub fn cross_check(&self, pcl: &Pcl) -> Result<(), QualityError> {
        for r in &self.rules {
            let deep = pcl.get(r.deep).ok_or(QualityError::UnmappedReason(r.deep))?;
            if deep.parent != Some(r.shallow) {
                return Err(QualityError::Fixture(format!("{} is not a child of {}", r.deep, r.shallow)));
            }
        }
        Ok(())
    }
}

/// Feedback as received from the publisher.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackInput {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub causes: Vec<Rn>,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

fn mentions(text_words: &[String], joined: &str, cue: &str) -> bool {
    let cue = cue.to_lowercase();
    if cue.contains(' ') {
        joined.contains(&format!(" {cue} "))
    } else {
        text_words.iter().any(|w| *w == cue || w.strip_suffix('s') == Some(cue.as_str()))
    }
}

/// Task and feedback features the rule table can key on.
pub fn reason_features(
    task: &TaskAgent,
    feedback: &FeedbackInput,
    rules: &ReasonRules,
    cfg: &QualityConfig,
) -> BTreeSet<String> {
    let mut features = BTreeSet::new();
    if task.range < cfg.small_range_m {
        features.insert("small_range".to_string());
    }
    if task.reward < cfg.low_reward {
        features.insert("low_reward".to_string());
    }
    if task.task_info.point().is_some() {
        features.insert("has_location".to_string());
    }
    let ws = words(&feedback.text);
    let joined = format!(" {} ", ws.join(" "));
    for (feature, cues) in &rules.feedback_cues {
        if cues.iter().any(|c| mentions(&ws, &joined, c)) {
            features.insert(feature.clone());
        }
    }
    features
}

/// Refines shallow causes into deep ones.
///
/// Shallow causes come from the tagged codes plus cue words in the text.
/// Each shallow node's children are scored by the rule table; children at or
/// above the threshold are returned best first. A shallow node with no
/// children, or none passing the threshold, is returned itself.
pub fn infer_reasons(
    feedback: &FeedbackInput,
    task: &TaskAgent,
    pcl: &mut Pcl,
    rules: &ReasonRules,
    cfg: &QualityConfig,
    now: u64,
) -> Result<Vec<Rn>, QualityError> {
    let mut starts: Vec<Rn> = Vec::new();
    for rn in &feedback.causes {
        if pcl.get(*rn).is_none() {
            return Err(QualityError::UnknownShallowCause(rn.to_string()));
        }
        if !starts.contains(rn) {
            starts.push(*rn);
        }
    }
    let ws = words(&feedback.text);
    let joined = format!(" {} ", ws.join(" "));
    for node in pcl.shallow() {
        if !starts.contains(&node.rn) && node.cues.iter().any(|c| mentions(&ws, &joined, c)) {
            starts.push(node.rn);
        }
    }
    if starts.is_empty() {
        return Err(QualityError::UnknownShallowCause(feedback.text.clone()));
    }

    let features = reason_features(task, feedback, rules, cfg);
    let mut out: Vec<Rn> = Vec::new();
    for start in starts {
        pcl.touch(start, now);
        let children = pcl.get(start).map(|n| n.children.clone()).unwrap_or_default();
        let mut scored: Vec<(f64, Rn)> = children
            .iter()
            .map(|child| {
                let score: f64 = rules
                    .rules
                    .iter()
                    .filter(|r| r.shallow == start && r.deep == *child && features.contains(&r.feature))
                    .map(|r| r.weight)
                    .sum();
                (score, *child)
            })
            .filter(|(s, _)| *s >= cfg.deep_score_threshold)
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let picked: Vec<Rn> =
            if scored.is_empty() { vec![start] } else { scored.into_iter().map(|(_, rn)| rn).collect() };
        for rn in picked {
            if rn != start {
                pcl.touch(rn, now);
            }
            if !out.contains(&rn) {
                out.push(rn);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Correction execution

/// How the task re-enters the lifecycle after corrections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reentry {
    /// Back to Generation: resolve the task again, then reassign.
    Regenerate,
    /// Back to Allocation with a fresh participant selection.
    Reassign,
    /// Back to Allocation keeping the current participants, who resubmit.
    Resubmit,
    /// Back to Processing on the data already collected.
    Reprocess,
}

/// Extra inputs that parameterise some operations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRequest {
    /// New result format for format corrections.
    #[serde(default)]
    pub format: Option<String>,
    /// Users whose credit is lowered; defaults to every participant.
    #[serde(default)]
    pub offenders: Vec<UserId>,
    /// Revised description used when the task is regenerated.
    #[serde(default)]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub tid: Tid,
    pub ons: Vec<On>,
    pub mutations: Vec<MutationRecord>,
    pub phase: TaskPhase,
    pub reentry: Reentry,
}

pub struct CorrectionContext<'a> {
    pub tasks: &'a mut TaskTable,
    pub agents: &'a mut AgentStore,
    pub steps: &'a MutationSteps,
    pub delta: f64,
    pub boost: BoostDirection,
}

fn mutation_for(
    field: FieldPath,
    action: MutationAction,
    task: &TaskAgent,
    steps: &MutationSteps,
    request: &CorrectionRequest,
) -> (Amount, bool) {
    // (amount, is_user_field)
    match field {
        FieldPath::TaskRange => (Amount::Ratio(steps.range_increase_ratio), false),
        FieldPath::TaskReward => {
            (Amount::Absolute((task.reward * steps.reward_increase_ratio).max(steps.reward_min_increase)), false)
        }
        FieldPath::TaskUCredit => match action {
            MutationAction::Set => (Amount::Absolute(steps.u_credit_set), false),
            _ => (Amount::Absolute(steps.credit_penalty), false),
        },
        FieldPath::TaskFormat => {
            (Amount::Text(request.format.clone().unwrap_or_else(|| steps.corrected_format.clone())), false)
        }
        // reopens every participant's submission
        FieldPath::TaskSubmitState => (Amount::Flag(false), false),
        FieldPath::TaskPrio => (Amount::Absolute(2.0), false),
        FieldPath::UserCredit => (Amount::Absolute(steps.credit_penalty), true),
    }
}

/// Fills the task's correction bit, applies every operation's mutations and
/// issues the phase switch. Mutations run before the switch; when several
/// operations switch phase the earliest lifecycle phase wins. Operations
/// without a switch re-enter at Allocation.
pub fn execute_corrections(
    ctx: &mut CorrectionContext<'_>,
    tid: Tid,
    ons: &[On],
    scol: &Scol,
    request: &CorrectionRequest,
) -> Result<CorrectionOutcome, QualityError> {
    let phase = ctx.tasks.phase(tid).ok_or(TaskError::UnknownTask(tid))?;
    if phase != TaskPhase::Feedback {
        let target = TaskPhase::Allocation;
        return Err(if phase == TaskPhase::Termination {
            TaskError::TerminatedTask
        } else {
            TaskError::IllegalTransition { phase, event: PhaseEvent::Correct(target) }
        }
        .into());
    }
    let mut plan: Vec<(On, Vec<OpStep>)> = Vec::with_capacity(ons.len());
    for on in ons {
        let op = scol.get(*on).ok_or(QualityError::UnknownOperation(*on))?;
        plan.push((*on, op.steps()?));
    }

    let participants: Vec<UserId> =
        ctx.tasks.spec(tid).map(|s| s.participants.users.iter().cloned().collect()).unwrap_or_default();
    {
        let agent = ctx.agents.task_mut(tid)?;
        agent.correction_bit = ons.iter().map(On::to_string).collect();
    }

    let log_start = ctx.agents.mutation_log.len();
    let mut switch: Option<TaskPhase> = None;
    let mut pool_changed = false;
    let mut resubmit = false;
    for (on, steps) in &plan {
        let on_label = on.to_string();
        for step in steps {
            match *step {
                OpStep::SwitchPhase(target) => {
                    switch = Some(switch.map_or(target, |s| s.min(target)));
                }
                OpStep::Mutate { field, action } => {
                    let task = ctx.agents.task(tid)?.clone();
                    let (amount, user_field) = mutation_for(field, action, &task, ctx.steps, request);
                    match field {
                        FieldPath::TaskRange | FieldPath::TaskReward | FieldPath::TaskUCredit => pool_changed = true,
                        FieldPath::TaskSubmitState => resubmit = true,
                        _ => {}
                    }
                    let targets: Vec<AgentRef> = if user_field {
                        let users = if request.offenders.is_empty() { &participants } else { &request.offenders };
                        users
                            .iter()
                            .filter(|u| ctx.agents.users.contains_key(*u))
                            .cloned()
                            .map(AgentRef::User)
                            .collect()
                    } else {
                        vec![AgentRef::Task(tid)]
                    };
                    for agent in targets {
                        let m = Mutation { agent, field, action, amount: amount.clone() };
                        ctx.agents.apply_mutation(&m, Some(tid), Some(&on_label))?;
                    }
                }
            }
        }
    }

    let target = switch.unwrap_or(TaskPhase::Allocation);
    let reentry = match target {
        TaskPhase::Generation => Reentry::Regenerate,
        TaskPhase::Processing => Reentry::Reprocess,
        _ if switch.is_some() || pool_changed || !resubmit => Reentry::Reassign,
        _ => Reentry::Resubmit,
    };
    let phase = ctx.tasks.advance(tid, PhaseEvent::Correct(target), ctx.delta)?;
    if let Some(pa) = ctx.agents.processes.get_mut(&tid) {
        pa.set_state(phase, ctx.boost);
    }
    ctx.agents.task_mut(tid)?.process_state = phase;

    Ok(CorrectionOutcome {
        tid,
        ons: ons.to_vec(),
        mutations: ctx.agents.mutation_log[log_start..].to_vec(),
        phase,
        reentry,
    })
}

/// Finds the completed task whose vector is most similar to `target`, if
/// any reaches `threshold`. Ties go to the lowest task id.
pub fn find_compensation<'a, I>(target: &[f64], completed: I, threshold: f64) -> Option<(Tid, f64)>
where
    I: IntoIterator<Item = (Tid, &'a [f64])>,
{
    let t = crate::resolution::TaskVector(target.to_vec());
    let mut best: Option<(Tid, f64)> = None;
    for (tid, v) in completed {
        let sim = t.cosine(&crate::resolution::TaskVector(v.to_vec()));
        if sim >= threshold && best.is_none_or(|(bt, bs)| sim > bs || (sim == bs && tid < bt)) {
            best = Some((tid, sim));
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Feedback loop

/// One evaluation by the publisher (or a scripted stand-in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: QualityScores,
    #[serde(default)]
    pub weights: Option<Weights>,
    pub entropy: EntropyInputs,
    #[serde(default)]
    pub feedback: FeedbackInput,
    #[serde(default)]
    pub request: CorrectionRequest,
}

pub trait QualitySource {
    /// Evaluates the task's current results; `round` counts corrections
    /// applied so far.
    fn evaluate(&mut self, tid: Tid, round: u32) -> Evaluation;
}

/// What the loop needs from the kernel.
pub trait LoopDriver {
    fn assess(&mut self, tid: Tid, eval: &Evaluation) -> Result<QualityReport, QualityError>;
    /// Runs one correction round and the downstream phases up to the next
    /// Feedback.
    fn correct(&mut self, tid: Tid, eval: &Evaluation) -> Result<CorrectionOutcome, QualityError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub tid: Tid,
    pub rounds: u32,
    pub final_q: f64,
    pub history: Vec<f64>,
}

/// Assess, and while unqualified infer, map, execute and re-assess. Gives up
/// after `max_rounds` corrections.
pub fn feedback_loop<D, S>(
    driver: &mut D,
    tid: Tid,
    source: &mut S,
    max_rounds: u32,
) -> Result<LoopOutcome, QualityError>
where
    D: LoopDriver + ?Sized,
    S: QualitySource + ?Sized,
{
    let mut history = Vec::new();
    let mut rounds = 0;
    loop {
        let eval = source.evaluate(tid, rounds);
        let report = driver.assess(tid, &eval)?;
        history.push(report.q);
        if report.verdict == Verdict::Qualified {
            return Ok(LoopOutcome { tid, rounds, final_q: report.q, history });
        }
        if rounds >= max_rounds {
            return Err(QualityError::MaxRoundsExceeded { rounds, last_q: report.q });
        }
        driver.correct(tid, &eval)?;
        rounds += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let e = |l, u| estimating_entropy(EntropyInputs { lambda: l, upsilon: u }).unwrap();
        assert_eq!(e(2.0, 2.0), 0.5);
        assert_eq!(e(0.0, 1.0), 0.0);
        // x = 3: F = 1/(1 + 1/3) = 3/4
        assert!((e(3.0, 1.0) - 0.75).abs() < 1e-12);
        assert_eq!(
            estimating_entropy(EntropyInputs { lambda: 1.0, upsilon: 0.0 }),
            Err(QualityError::NonPositiveUpsilon)
        );
        assert_eq!(estimating_entropy(EntropyInputs { lambda: -1.0, upsilon: 1.0 }), Err(QualityError::NegativeLambda));
    }

    #[test]
    fn assess_examples() {
        let ones = QualityScores::from_ratios([1.0; 5]).unwrap();
        let r = assess(Tid(1), &ones, &Weights([0.1, 0.2, 0.3, 0.2, 0.2]), 0.0, 1.0, AssessmentLevel::Overall).unwrap();
        assert!((r.q - 1.0).abs() < 1e-12);
        assert_eq!(r.verdict, Verdict::Qualified);

        let scores = QualityScores::from_ratios([0.8, 1.0, 0.6, 0.9, 0.5]).unwrap();
        let w = Weights([0.3, 0.2, 0.2, 0.2, 0.1]);
        let r = assess(Tid(1), &scores, &w, 0.5, 0.8, AssessmentLevel::Overall).unwrap();
        // 0.24 + 0.2 + 0.12 + 0.18 + 0.05 = 0.79; 0.79 / 1.5
        assert!((r.q - 0.526_667).abs() < 1e-6);
        assert_eq!(r.verdict, Verdict::Unqualified);

        let bad = Weights([0.5, 0.5, 0.5, 0.0, 0.0]);
        assert!(matches!(
            assess(Tid(1), &scores, &bad, 0.0, 0.8, AssessmentLevel::Overall),
            Err(QualityError::WeightSumViolation(_))
        ));
    }

    #[test]
    fn scores_validate() {
        assert!(QualityScores::new([1.0; 5], [0.5; 5]).is_err());
        assert!(QualityScores::new([1.0; 5], [0.0; 5]).is_err());
        assert!(QualityScores::new([-0.1, 0.0, 0.0, 0.0, 0.0], [1.0; 5]).is_err());
        let s = QualityScores::new([5.0, 10.0, 0.0, 2.0, 1.0], [10.0, 10.0, 10.0, 4.0, 1.0]).unwrap();
        assert_eq!(s.ratios(), [0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn codes_round_trip_display() {
        assert_eq!("0x02".parse::<Rn>().unwrap(), Rn(2));
        assert_eq!(Rn(2).to_string(), "0x02");
        assert_eq!(Rn(0x1003).to_string(), "0x1003");
        assert_eq!("No.31".parse::<On>().unwrap(), On(31));
        assert_eq!(On(4).to_string(), "No.4");
        assert!("2".parse::<Rn>().is_err());
        assert!("31".parse::<On>().is_err());
    }

    #[test]
    fn descriptors_parse() {
        let d = |s: &str, a: Option<MutationAction>| OperationDescriptor { descriptor: s.into(), action: a }.step();
        assert_eq!(d("PS->Generated state", None).unwrap(), OpStep::SwitchPhase(TaskPhase::Generation));
        assert_eq!(d("PS->Assignment state", None).unwrap(), OpStep::SwitchPhase(TaskPhase::Allocation));
        assert_eq!(
            d("M->Task-agent.range", Some(MutationAction::Increase)).unwrap(),
            OpStep::Mutate { field: FieldPath::TaskRange, action: MutationAction::Increase }
        );
        assert!(d("M->Task-agent.range", None).is_err());
        assert!(d("PS->Execution state", None).is_err());
    }

    fn small_pcl() -> Pcl {
        let mut shallow = ReasonNode::new(Rn(2), "insufficient participants", Depth::Shallow, None);
        shallow.cues = vec!["participants".into()];
        Pcl::from_nodes(vec![
            ReasonNode::new(Rn(0x0201), "task release range too small", Depth::Deep, Some(Rn(2))),
            shallow,
            ReasonNode::new(Rn(0x0202), "less task incentives", Depth::Deep, Some(Rn(2))),
            ReasonNode::new(Rn(1), "unclear task description", Depth::Shallow, None),
        ])
        .unwrap()
    }

    fn rsmt() -> Rsmt {
        Rsmt::from_rows(vec![
            RsmtRow { rn: Rn(2), phrase: String::new(), ons: vec![On(2)] },
            RsmtRow { rn: Rn(0x0201), phrase: String::new(), ons: vec![On(2)] },
        ])
        .unwrap()
    }

    #[test]
    fn pcl_structure() {
        let pcl = small_pcl();
        assert_eq!(pcl.get(Rn(2)).unwrap().children, vec![Rn(0x0201), Rn(0x0202)]);
        let orphan = Pcl::from_nodes(vec![ReasonNode::new(Rn(9), "x", Depth::Deep, Some(Rn(8)))]);
        assert_eq!(orphan.unwrap_err(), QualityError::ParentNotFound(Rn(8)));
    }

    #[test]
    fn rdt_updates() {
        let mut pcl = small_pcl();
        let policy = PruneConfig { max_retrievals: 1, min_age: 100 };
        let rsmt = rsmt();
        update_rdt(
            &mut pcl,
            RdtOp::AddNode(ReasonNode::new(Rn(0x0203), "short deadline", Depth::Deep, Some(Rn(2)))),
            &rsmt,
            &policy,
            0,
        )
        .unwrap();
        assert_eq!(pcl.len(), 5);
        assert_eq!(
            update_rdt(
                &mut pcl,
                RdtOp::AddNode(ReasonNode::new(Rn(0x0501), "x", Depth::Deep, Some(Rn(5)))),
                &rsmt,
                &policy,
                0
            ),
            Err(QualityError::ParentNotFound(Rn(5)))
        );
        assert_eq!(
            update_rdt(&mut pcl, RdtOp::Prune(Rn(0x0201)), &rsmt, &policy, 1000),
            Err(QualityError::ProtectedNode(Rn(0x0201)))
        );
        // too young
        assert_eq!(
            update_rdt(&mut pcl, RdtOp::Prune(Rn(0x0203)), &rsmt, &policy, 50),
            Err(QualityError::NotPrunable(Rn(0x0203)))
        );
        update_rdt(&mut pcl, RdtOp::Prune(Rn(0x0203)), &rsmt, &policy, 1000).unwrap();
        assert!(pcl.get(Rn(0x0203)).is_none());
        assert!(!pcl.get(Rn(2)).unwrap().children.contains(&Rn(0x0203)));
    }

    #[test]
    fn prune_sweep_keeps_protected() {
        let mut pcl = small_pcl();
        let policy = PruneConfig { max_retrievals: 1, min_age: 10 };
        let removed = pcl.prune_stale(100, &rsmt(), &policy);
        // 0x0202 and 0x01 are unreferenced stale leaves
        assert_eq!(removed, vec![Rn(1), Rn(0x0202)]);
        assert!(pcl.get(Rn(0x0201)).is_some());
    }

    #[test]
    fn mapping_dedups_in_order() {
        let rsmt = Rsmt::from_rows(vec![
            RsmtRow { rn: Rn(0x1001), phrase: String::new(), ons: vec![On(31), On(4)] },
            RsmtRow { rn: Rn(0x1003), phrase: String::new(), ons: vec![On(33), On(31)] },
        ])
        .unwrap();
        assert_eq!(map_to_operations(&[Rn(0x1003), Rn(0x1001)], &rsmt).unwrap(), vec![On(33), On(31), On(4)]);
        assert_eq!(map_to_operations(&[Rn(7)], &rsmt), Err(QualityError::UnmappedReason(Rn(7))));
        assert_eq!(map_to_operations(&[], &rsmt), Err(QualityError::EmptyReasons));
    }

    #[test]
    fn compensation_picks_most_similar() {
        let a = [1.0, 0.0, 1.0];
        let b = [1.0, 0.1, 1.0];
        let c = [0.0, 1.0, 0.0];
        let found = find_compensation(&[1.0, 0.0, 1.0], [(Tid(2), &b[..]), (Tid(1), &a[..]), (Tid(3), &c[..])], 0.9);
        assert_eq!(found.map(|f| f.0), Some(Tid(1)));
        assert_eq!(find_compensation(&[1.0, 0.0, 0.0], [(Tid(3), &c[..])], 0.9), None);
    }

    struct Scripted {
        start: f64,
        step: f64,
    }

    impl QualitySource for Scripted {
        fn evaluate(&mut self, _tid: Tid, round: u32) -> Evaluation {
            let xi = (self.start + self.step * round as f64).min(1.0);
            let mut ratios = [1.0; 5];
            ratios[0] = xi;
            Evaluation {
                scores: QualityScores::from_ratios(ratios).unwrap(),
                weights: Some(Weights([1.0, 0.0, 0.0, 0.0, 0.0])),
                entropy: EntropyInputs { lambda: 0.0, upsilon: 1.0 },
                feedback: FeedbackInput::default(),
                request: CorrectionRequest::default(),
            }
        }
    }

    struct CountingDriver {
        corrections: u32,
    }

    impl LoopDriver for CountingDriver {
        fn assess(&mut self, tid: Tid, eval: &Evaluation) -> Result<QualityReport, QualityError> {
            let e = estimating_entropy(eval.entropy)?;
            assess(tid, &eval.scores, &eval.weights.unwrap(), e, 0.8, AssessmentLevel::Overall)
        }

        fn correct(&mut self, tid: Tid, _eval: &Evaluation) -> Result<CorrectionOutcome, QualityError> {
            self.corrections += 1;
            Ok(CorrectionOutcome {
                tid,
                ons: vec![],
                mutations: vec![],
                phase: TaskPhase::Feedback,
                reentry: Reentry::Resubmit,
            })
        }
    }

    #[test]
    fn loop_converges_and_gives_up() {
        let mut d = CountingDriver { corrections: 0 };
        let out = feedback_loop(&mut d, Tid(1), &mut Scripted { start: 0.6, step: 0.1 }, 5).unwrap();
        assert!(out.rounds <= 3);
        assert_eq!(out.rounds, d.corrections);

        let out = feedback_loop(&mut d, Tid(1), &mut Scripted { start: 0.9, step: 0.0 }, 5).unwrap();
        assert_eq!(out.rounds, 0);

        let mut d = CountingDriver { corrections: 0 };
        let err = feedback_loop(&mut d, Tid(1), &mut Scripted { start: 0.1, step: 0.0 }, 5).unwrap_err();
        assert!(matches!(err, QualityError::MaxRoundsExceeded { rounds: 5, .. }));
        assert_eq!(d.corrections, 5);
    }
}
