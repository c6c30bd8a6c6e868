//! Task tuple, termination conditions and the seven-phase lifecycle.
//!
//! A task moves clockwise from [`TaskPhase::Creation`] to
//! [`TaskPhase::Termination`]. The only backward edges leave
//! [`TaskPhase::Feedback`] and land in one of the correction targets
//! ([`FEEDBACK_TARGETS`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::GeoPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tid(pub u64);

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Self {
        UserId(id.into())
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub String);

impl DeviceId {
    pub fn new(id: impl Into<String>) -> Self {
        DeviceId(id.into())
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lifecycle phase of a task. Declaration order is the clockwise order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskPhase {
    Creation,
    Generation,
    Allocation,
    Execution,
    Processing,
    Feedback,
    Termination,
}

/// Number of lifecycle phases.
pub const PHASE_COUNT: usize = 7;

/// Phases a correction may send a task back to.
pub const FEEDBACK_TARGETS: [TaskPhase; 3] = [TaskPhase::Generation, TaskPhase::Allocation, TaskPhase::Processing];

impl TaskPhase {
    pub const ALL: [TaskPhase; PHASE_COUNT] = [
        TaskPhase::Creation,
        TaskPhase::Generation,
        TaskPhase::Allocation,
        TaskPhase::Execution,
        TaskPhase::Processing,
        TaskPhase::Feedback,
        TaskPhase::Termination,
    ];

    pub fn is_feedback_target(self) -> bool {
        FEEDBACK_TARGETS.contains(&self)
    }

    pub fn is_final(self) -> bool {
        self == TaskPhase::Termination
    }

    /// Clockwise successor, `None` for the absorbing phase.
    pub fn successor(self) -> Option<TaskPhase> {
        let idx = self as usize;
        TaskPhase::ALL.get(idx + 1).copied()
    }
}

impl fmt::Display for TaskPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PhaseEvent {
    Submit,
    Analyze,
    Assign,
    Upload,
    Process,
    Evaluate(f64),
    Correct(TaskPhase),
}

impl PhaseEvent {
    /// One representative of every event shape, used by exhaustive sweeps.
    pub fn representatives(delta: f64) -> Vec<PhaseEvent> {
        let mut events = vec![
            PhaseEvent::Submit,
            PhaseEvent::Analyze,
            PhaseEvent::Assign,
            PhaseEvent::Upload,
            PhaseEvent::Process,
            PhaseEvent::Evaluate(delta),
            PhaseEvent::Evaluate(delta / 2.0),
        ];
        events.extend(TaskPhase::ALL.iter().map(|p| PhaseEvent::Correct(*p)));
        events
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("task description is empty")]
    EmptyDescription,
    #[error("task has no termination condition")]
    NoTerminationCondition,
    #[error("termination scale must be at least 1")]
    InvalidScale,
    #[error("classification `{0}` is not registered")]
    UnknownClassification(String),
    #[error("event {event:?} is not legal in phase {phase}")]
    IllegalTransition { phase: TaskPhase, event: PhaseEvent },
    #[error("task is already terminated")]
    TerminatedTask,
    #[error("unknown task {0}")]
    UnknownTask(Tid),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TerminationCondition {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<String>,
}

impl TerminationCondition {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.deadline.is_none() && self.scale.is_none() && self.extra.is_none() {
            return Err(TaskError::NoTerminationCondition);
        }
        if self.scale == Some(0) {
            return Err(TaskError::InvalidScale);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub lang: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Participants {
    pub users: BTreeSet<UserId>,
    pub devices: BTreeSet<DeviceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub tid: Tid,
    pub publisher: UserId,
    pub participants: Participants,
    pub classification: String,
    pub description: TaskDescription,
    pub termination: TerminationCondition,
    pub created_at: u64,
}

/// Structured selections made through buttons or rule pickers when publishing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscreteFeatures {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub participant_count: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_days: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prio: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_credit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm_flag: Option<String>,
}

/// What a publisher submits: free text plus discrete features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTaskInput {
    pub publisher: UserId,
    #[serde(default = "default_lang")]
    pub lang: String,
    pub description: String,
    pub classification: String,
    #[serde(default)]
    pub discrete: DiscreteFeatures,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<String>,
}

fn default_lang() -> String {
    "en".to_string()
}

impl RawTaskInput {
    pub fn new(
        publisher: impl Into<String>,
        description: impl Into<String>,
        classification: impl Into<String>,
    ) -> Self {
        RawTaskInput {
            publisher: UserId::new(publisher),
            lang: default_lang(),
            description: description.into(),
            classification: classification.into(),
            discrete: DiscreteFeatures::default(),
            deadline: None,
            scale: None,
            extra: None,
        }
    }

    pub fn termination(&self) -> TerminationCondition {
        TerminationCondition { deadline: self.deadline, scale: self.scale, extra: self.extra.clone() }
    }
}

/// Monotonic task-identifier source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TidAllocator {
    next: u64,
}

impl Default for TidAllocator {
    fn default() -> Self {
        TidAllocator { next: 1 }
    }
}

impl TidAllocator {
    pub fn allocate(&mut self) -> Tid {
        let tid = Tid(self.next);
        self.next += 1;
        tid
    }
}

/// Validates raw input and produces a fresh task in the Creation phase.
pub fn create_task(
    raw: &RawTaskInput,
    classes: &[String],
    tids: &mut TidAllocator,
    now: u64,
) -> Result<(TaskSpec, TaskPhase), TaskError> {
    if raw.description.trim().is_empty() {
        return Err(TaskError::EmptyDescription);
    }
    let termination = raw.termination();
    termination.validate()?;
    if !classes.iter().any(|c| c == &raw.classification) {
        return Err(TaskError::UnknownClassification(raw.classification.clone()));
    }
    let spec = TaskSpec {
        tid: tids.allocate(),
        publisher: raw.publisher.clone(),
        participants: Participants::default(),
        classification: raw.classification.clone(),
        description: TaskDescription { lang: raw.lang.clone(), text: raw.description.clone() },
        termination,
        created_at: now,
    };
    Ok((spec, TaskPhase::Creation))
}

/// Applies one lifecycle event. Pure; safe from any thread.
///
/// At Feedback, `Evaluate(q)` with `q < delta` leaves the task in Feedback
/// awaiting a `Correct` event.
pub fn advance_phase(current: TaskPhase, event: PhaseEvent, delta: f64) -> Result<TaskPhase, TaskError> {
    use PhaseEvent::*;
    use TaskPhase::*;

    let illegal = || TaskError::IllegalTransition { phase: current, event };
    match (current, event) {
        (Termination, _) => Err(TaskError::TerminatedTask),
        (Creation, Submit) => Ok(Generation),
        (Generation, Analyze) => Ok(Allocation),
        (Allocation, Assign) => Ok(Execution),
        (Execution, Upload) => Ok(Processing),
        (Processing, Process) => Ok(Feedback),
        (Feedback, Evaluate(q)) if q.is_nan() => Err(illegal()),
        (Feedback, Evaluate(q)) => Ok(if q >= delta { Termination } else { Feedback }),
        (Feedback, Correct(target)) if target.is_feedback_target() => Ok(target),
        _ => Err(illegal()),
    }
}

/// Names of extra predicates currently satisfied.
#[derive(Debug, Clone, Default)]
pub struct PredicateContext {
    pub satisfied: BTreeSet<String>,
}

/// True iff any present termination condition holds.
pub fn check_termination(spec: &TaskSpec, now: u64, result_count: u32, extra: &PredicateContext) -> bool {
    let tc = &spec.termination;
    tc.deadline.is_some_and(|d| now > d)
        || tc.scale.is_some_and(|s| result_count >= s)
        || tc.extra.as_ref().is_some_and(|o| extra.satisfied.contains(o))
}

/// Specs and phases of all known tasks.
#[derive(Debug, Clone, Default)]
pub struct TaskTable {
    tids: TidAllocator,
    tasks: BTreeMap<Tid, (TaskSpec, TaskPhase)>,
}

impl TaskTable {
    pub fn create(&mut self, raw: &RawTaskInput, classes: &[String], now: u64) -> Result<Tid, TaskError> {
        let (spec, phase) = create_task(raw, classes, &mut self.tids, now)?;
        let tid = spec.tid;
        self.tasks.insert(tid, (spec, phase));
        Ok(tid)
    }

    pub fn spec(&self, tid: Tid) -> Option<&TaskSpec> {
        self.tasks.get(&tid).map(|(s, _)| s)
    }

    pub fn spec_mut(&mut self, tid: Tid) -> Option<&mut TaskSpec> {
        self.tasks.get_mut(&tid).map(|(s, _)| s)
    }

    pub fn phase(&self, tid: Tid) -> Option<TaskPhase> {
        self.tasks.get(&tid).map(|(_, p)| *p)
    }

    /// Applies `event` through [`advance_phase`] and stores the result.
    pub fn advance(&mut self, tid: Tid, event: PhaseEvent, delta: f64) -> Result<TaskPhase, TaskError> {
        let (_, phase) = self.tasks.get_mut(&tid).ok_or(TaskError::UnknownTask(tid))?;
        let next = advance_phase(*phase, event, delta)?;
        *phase = next;
        Ok(next)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TaskSpec, TaskPhase)> {
        self.tasks.values().map(|(s, p)| (s, *p))
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}
