//! Software-defined resources: the five agent kinds, the system-wide agent
//! store and per-task resource graphs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::{AlarmThresholds, AvailabilityConfig};
use crate::scheduler::{boosted_prio, BoostDirection, Policy, MAX_PRIO};
use crate::task::{DeviceId, TaskPhase, Tid, UserId};

pub const MAX_CREDIT: f64 = 100.0;

/// Smallest task range in meters; range mutations clamp here.
pub const MIN_RANGE_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeoPoint {
    pub x: f64,
    pub y: f64,
}

impl GeoPoint {
    pub fn new(x: f64, y: f64) -> Self {
        GeoPoint { x, y }
    }

    /// Planar distance in meters.
    pub fn distance(&self, other: &GeoPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tpid(pub u64);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("malformed device status: {0}")]
    MalformedStatus(&'static str),
    #[error("unknown task {0}")]
    UnknownTask(Tid),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("unknown agent field `{0}`")]
    UnknownField(String),
    #[error("amount {amount} is outside the domain of {field}")]
    OutOfDomain { field: FieldPath, amount: String },
    #[error("action {action:?} does not apply to {field}")]
    UnsupportedAction { field: FieldPath, action: MutationAction },
}

/// Named location with an optional point and radius.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocationRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<GeoPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_m: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub time_range: Option<(u64, u64)>,
    pub location: Option<LocationRef>,
    pub vector: Vec<f64>,
    pub classification: String,
    pub topic: String,
    pub manner: Option<String>,
    pub participant_count: Option<u32>,
    pub duration_days: Option<f64>,
    pub keywords: BTreeSet<String>,
}

impl TaskInfo {
    pub fn point(&self) -> Option<GeoPoint> {
        self.location.as_ref().and_then(|l| l.point)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAgent {
    pub task_id: Tid,
    pub tpid: Tpid,
    pub process_state: TaskPhase,
    pub prio: u8,
    pub task_info: TaskInfo,
    pub device_num: u32,
    pub device_ids: Vec<DeviceId>,
    pub sensing_data: Option<String>,
    /// Geographic radius in meters around `task_info` location.
    pub range: f64,
    pub reward: f64,
    pub format: String,
    pub u_credit: f64,
    pub submit_state: BTreeMap<UserId, bool>,
    pub correction_bit: Vec<String>,
}

impl TaskAgent {
    pub fn check_invariants(&self) -> bool {
        self.prio <= MAX_PRIO
            && self.range > 0.0
            && self.range.is_finite()
            && self.reward >= 0.0
            && self.reward.is_finite()
            && (0.0..=MAX_CREDIT).contains(&self.u_credit)
    }

    /// Target number of assignees.
    pub fn participant_target(&self) -> u32 {
        self.task_info.participant_count.unwrap_or(1).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAgent {
    pub user_id: UserId,
    #[serde(default)]
    pub published_tasks: Vec<Tid>,
    #[serde(default)]
    pub executed_tasks: Vec<Tid>,
    pub credit: f64,
    #[serde(default)]
    pub interests: BTreeSet<String>,
    pub location: GeoPoint,
}

impl UserAgent {
    pub fn new(id: impl Into<String>, location: GeoPoint, credit: f64) -> Self {
        UserAgent {
            user_id: UserId::new(id),
            published_tasks: Vec::new(),
            executed_tasks: Vec::new(),
            credit,
            interests: BTreeSet::new(),
            location,
        }
    }

    pub fn with_interests<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.interests = tags.into_iter().map(Into::into).collect();
        self
    }

    pub fn check_invariants(&self) -> bool {
        (0.0..=MAX_CREDIT).contains(&self.credit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceAgent {
    pub device_id: DeviceId,
    pub device_type: String,
    pub remaining_power: f64,
    pub location: GeoPoint,
    pub usage: f64,
    pub storage_occupancy: f64,
    pub availability: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<UserId>,
}

/// Status pushed by a terminal. Fields are optional so malformed reports can
/// be detected rather than rejected by the parser.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceStatusReport {
    pub device_id: Option<String>,
    pub device_type: Option<String>,
    pub remaining_power: Option<f64>,
    pub usage: Option<f64>,
    pub storage_occupancy: Option<f64>,
    pub location: Option<GeoPoint>,
    pub owner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentAgent {
    pub cpu_count: u32,
    pub cpu_util: f64,
    pub memory_used: f64,
    pub storage_used: f64,
    pub disk_free: u64,
    pub user_volume: u64,
    pub device_total: u64,
    pub alarm_thresholds: AlarmThresholds,
}

impl EnvironmentAgent {
    pub fn new(alarm_thresholds: AlarmThresholds) -> Self {
        EnvironmentAgent {
            cpu_count: 1,
            cpu_util: 0.0,
            memory_used: 0.0,
            storage_used: 0.0,
            disk_free: 0,
            user_volume: 0,
            device_total: 0,
            alarm_thresholds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub cpu_count: u32,
    pub cpu_util: f64,
    pub memory_used: f64,
    pub storage_used: f64,
    pub disk_free: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Alarm {
    Cpu { value: f64, threshold: f64 },
    Storage { value: f64, threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessAgent {
    pub tpid: Tpid,
    pub task_id: Tid,
    pub process_state: TaskPhase,
    pub process_strategy: String,
    pub process_prio: u8,
    /// Priority used by the feedback-priority queue; equals `process_prio`
    /// outside the Feedback phase.
    pub effective_prio: u8,
    pub algorithm_flag: Policy,
    pub arrival_time: u64,
    pub served_time: u64,
    pub expected_service: u64,
}

impl ProcessAgent {
    pub fn new(tpid: Tpid, task_id: Tid, policy: Policy, prio: u8, arrival: u64) -> Self {
        let prio = prio.min(MAX_PRIO);
        ProcessAgent {
            tpid,
            task_id,
            process_state: TaskPhase::Creation,
            process_strategy: policy.name().to_string(),
            process_prio: prio,
            effective_prio: prio,
            algorithm_flag: policy,
            arrival_time: arrival,
            served_time: 0,
            expected_service: 1,
        }
    }

    /// Mirrors a task phase change, applying the feedback boost on entry to
    /// Feedback and restoring the original priority on exit.
    pub fn set_state(&mut self, phase: TaskPhase, direction: BoostDirection) {
        self.process_state = phase;
        self.effective_prio =
            if phase == TaskPhase::Feedback { boosted_prio(self.process_prio, direction) } else { self.process_prio };
    }

    pub fn check_invariants(&self) -> bool {
        self.process_prio <= MAX_PRIO && self.effective_prio <= MAX_PRIO
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentRef {
    Task(Tid),
    User(UserId),
}

/// Mutable agent fields addressable by correction operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FieldPath {
    TaskRange,
    TaskReward,
    TaskUCredit,
    TaskFormat,
    TaskSubmitState,
    TaskPrio,
    UserCredit,
}

impl FieldPath {
    pub const ALL: [FieldPath; 7] = [
        FieldPath::TaskRange,
        FieldPath::TaskReward,
        FieldPath::TaskUCredit,
        FieldPath::TaskFormat,
        FieldPath::TaskSubmitState,
        FieldPath::TaskPrio,
        FieldPath::UserCredit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FieldPath::TaskRange => "Task-agent.range",
            FieldPath::TaskReward => "Task-agent.reward",
            FieldPath::TaskUCredit => "Task-agent.u-credit",
            FieldPath::TaskFormat => "Task-agent.format",
            FieldPath::TaskSubmitState => "Task-agent.submit-state",
            FieldPath::TaskPrio => "Task-agent.prio",
            FieldPath::UserCredit => "User-agent.credit",
        }
    }

    pub fn is_user_field(self) -> bool {
        self == FieldPath::UserCredit
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FieldPath {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FieldPath::ALL.into_iter().find(|f| f.as_str() == s).ok_or_else(|| AgentError::UnknownField(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutationAction {
    Set,
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Amount {
    /// Absolute quantity in the field's unit.
    Absolute(f64),
    /// Fraction of the current value.
    Ratio(f64),
    Text(String),
    Flag(bool),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mutation {
    pub agent: AgentRef,
    pub field: FieldPath,
    pub action: MutationAction,
    pub amount: Amount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationRecord {
    pub tid: Option<Tid>,
    pub on: Option<String>,
    pub agent: AgentRef,
    pub field: FieldPath,
    pub before: Value,
    pub after: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum AgentSnapshot {
    Task(TaskAgent),
    User(UserAgent),
}

/// All agents in the system (the system resource graph).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentStore {
    pub users: BTreeMap<UserId, UserAgent>,
    pub devices: BTreeMap<DeviceId, DeviceAgent>,
    pub tasks: BTreeMap<Tid, TaskAgent>,
    pub processes: BTreeMap<Tid, ProcessAgent>,
    pub environment: EnvironmentAgent,
    pub availability: AvailabilityConfig,
    pub mutation_log: Vec<MutationRecord>,
    pub alarm_log: Vec<Alarm>,
    next_tpid: u64,
}

impl AgentStore {
    pub fn new(alarm_thresholds: AlarmThresholds, availability: AvailabilityConfig) -> Self {
        AgentStore {
            users: BTreeMap::new(),
            devices: BTreeMap::new(),
            tasks: BTreeMap::new(),
            processes: BTreeMap::new(),
            environment: EnvironmentAgent::new(alarm_thresholds),
            availability,
            mutation_log: Vec::new(),
            alarm_log: Vec::new(),
            next_tpid: 1,
        }
    }

    pub fn allocate_tpid(&mut self) -> Tpid {
        let t = Tpid(self.next_tpid);
        self.next_tpid += 1;
        t
    }

    pub fn upsert_user(&mut self, user: UserAgent) {
        self.users.insert(user.user_id.clone(), user);
        self.environment.user_volume = self.users.len() as u64;
    }

    /// Inserts the task agent and its process agent together, keeping the
    /// one-to-one pairing.
    pub fn insert_task(&mut self, agent: TaskAgent, process: ProcessAgent) {
        debug_assert_eq!(agent.task_id, process.task_id);
        self.processes.insert(process.task_id, process);
        self.tasks.insert(agent.task_id, agent);
    }

    pub fn task(&self, tid: Tid) -> Result<&TaskAgent, AgentError> {
        self.tasks.get(&tid).ok_or(AgentError::UnknownTask(tid))
    }

    pub fn task_mut(&mut self, tid: Tid) -> Result<&mut TaskAgent, AgentError> {
        self.tasks.get_mut(&tid).ok_or(AgentError::UnknownTask(tid))
    }

    /// Creates or refreshes a device agent from a terminal status report.
    pub fn register_device(&mut self, report: &DeviceStatusReport) -> Result<DeviceAgent, AgentError> {
        let id =
            report.device_id.as_deref().filter(|s| !s.is_empty()).ok_or(AgentError::MalformedStatus("device_id"))?;
        let power = report.remaining_power.ok_or(AgentError::MalformedStatus("remaining_power"))?;
        let usage = report.usage.ok_or(AgentError::MalformedStatus("usage"))?;
        let storage = report.storage_occupancy.unwrap_or(0.0);
        for (name, v) in [("remaining_power", power), ("usage", usage), ("storage_occupancy", storage)] {
            if !(0.0..=100.0).contains(&v) {
                return Err(AgentError::MalformedStatus(name));
            }
        }
        let existing = self.devices.get(&DeviceId::new(id));
        let agent = DeviceAgent {
            device_id: DeviceId::new(id),
            device_type: report
                .device_type
                .clone()
                .or_else(|| existing.map(|d| d.device_type.clone()))
                .unwrap_or_else(|| "unknown".into()),
            remaining_power: power,
            location: report.location.or_else(|| existing.map(|d| d.location)).unwrap_or_default(),
            usage,
            storage_occupancy: storage,
            availability: self.availability.is_available(power, usage),
            owner: report.owner.clone().map(UserId).or_else(|| existing.and_then(|d| d.owner.clone())),
        };
        self.devices.insert(agent.device_id.clone(), agent.clone());
        self.environment.device_total = self.devices.len() as u64;
        Ok(agent)
    }

    /// Refreshes the environment agent and raises threshold alarms.
    pub fn update_environment(&mut self, snapshot: &EnvSnapshot) -> Vec<Alarm> {
        let env = &mut self.environment;
        env.cpu_count = snapshot.cpu_count;
        env.cpu_util = snapshot.cpu_util.clamp(0.0, 100.0);
        env.memory_used = snapshot.memory_used.clamp(0.0, 100.0);
        env.storage_used = snapshot.storage_used.clamp(0.0, 100.0);
        env.disk_free = snapshot.disk_free;
        let thr = env.alarm_thresholds;
        let mut alarms = Vec::new();
        if env.cpu_util >= thr.cpu {
            alarms.push(Alarm::Cpu { value: env.cpu_util, threshold: thr.cpu });
        }
        if env.storage_used >= thr.storage {
            alarms.push(Alarm::Storage { value: env.storage_used, threshold: thr.storage });
        }
        self.alarm_log.extend(alarms.iter().cloned());
        alarms
    }

    /// Builds the resource graph for one task from the current store.
    pub fn build_trg(&self, tid: Tid) -> Result<TaskResourceGraph, AgentError> {
        let task = self.tasks.get(&tid).ok_or(AgentError::UnknownTask(tid))?;
        let process = self.processes.get(&tid).ok_or(AgentError::UnknownTask(tid))?;
        let center = task.task_info.point();
        let within = |p: &GeoPoint| center.is_none_or(|c| c.distance(p) <= task.range);

        let users: Vec<UserAgent> = self.users.values().filter(|u| within(&u.location)).cloned().collect();
        let devices: Vec<DeviceAgent> =
            self.devices.values().filter(|d| d.availability && within(&d.location)).cloned().collect();

        let mut edges = vec![
            TrgEdge::new(NodeRef::Task(tid), NodeRef::Process(process.tpid), Relation::ConstrainedBy),
            TrgEdge::new(NodeRef::Task(tid), NodeRef::Environment, Relation::ConstrainedBy),
        ];
        for u in &users {
            edges.push(TrgEdge::new(NodeRef::User(u.user_id.clone()), NodeRef::Task(tid), Relation::CandidateOf));
            if center.is_some() {
                edges.push(TrgEdge::new(NodeRef::User(u.user_id.clone()), NodeRef::Task(tid), Relation::LocatedNear));
            }
        }
        for d in &devices {
            edges.push(TrgEdge::new(NodeRef::Device(d.device_id.clone()), NodeRef::Task(tid), Relation::CandidateOf));
            if center.is_some() {
                edges.push(TrgEdge::new(
                    NodeRef::Device(d.device_id.clone()),
                    NodeRef::Task(tid),
                    Relation::LocatedNear,
                ));
            }
            if let Some(owner) = d.owner.as_ref().filter(|o| users.iter().any(|u| &u.user_id == *o)) {
                edges.push(TrgEdge::new(
                    NodeRef::User(owner.clone()),
                    NodeRef::Device(d.device_id.clone()),
                    Relation::OwnsDevice,
                ));
            }
        }

        Ok(TaskResourceGraph {
            root: tid,
            task: task.clone(),
            process: process.clone(),
            environment: self.environment.clone(),
            users,
            devices,
            edges,
        })
    }

    /// Applies one mutation, clamping the result into the field's domain,
    /// and logs it with its provenance.
    pub fn apply_mutation(
        &mut self,
        mutation: &Mutation,
        tid: Option<Tid>,
        on: Option<&str>,
    ) -> Result<AgentSnapshot, AgentError> {
        let field = mutation.field;
        let (before, after, snapshot) = match &mutation.agent {
            AgentRef::Task(t) => {
                if field.is_user_field() {
                    return Err(AgentError::UnknownField(format!("Task-agent{}", &field.as_str()[10..])));
                }
                let agent = self.tasks.get_mut(t).ok_or(AgentError::UnknownTask(*t))?;
                let (b, a) = mutate_task(agent, mutation)?;
                (b, a, AgentSnapshot::Task(agent.clone()))
            }
            AgentRef::User(u) => {
                if !field.is_user_field() {
                    return Err(AgentError::UnknownField(format!("User-agent{}", &field.as_str()[10..])));
                }
                let agent = self.users.get_mut(u).ok_or_else(|| AgentError::UnknownUser(u.clone()))?;
                let old = agent.credit;
                agent.credit = numeric(field, old, mutation, 0.0, MAX_CREDIT)?;
                (Value::from(old), Value::from(agent.credit), AgentSnapshot::User(agent.clone()))
            }
        };
        self.mutation_log.push(MutationRecord {
            tid,
            on: on.map(str::to_string),
            agent: mutation.agent.clone(),
            field,
            before,
            after,
        });
        Ok(snapshot)
    }

    /// Checks every agent invariant plus the task/process pairing.
    pub fn check_invariants(&self) -> bool {
        self.tasks.values().all(TaskAgent::check_invariants)
            && self.users.values().all(UserAgent::check_invariants)
            && self.processes.values().all(ProcessAgent::check_invariants)
            && self.tasks.len() == self.processes.len()
            && self.tasks.iter().all(|(tid, ta)| self.processes.get(tid).is_some_and(|pa| pa.tpid == ta.tpid))
            && self
                .devices
                .values()
                .all(|d| [d.remaining_power, d.usage, d.storage_occupancy].iter().all(|v| (0.0..=100.0).contains(v)))
    }
}

fn mutate_task(agent: &mut TaskAgent, m: &Mutation) -> Result<(Value, Value), AgentError> {
    let field = m.field;
    Ok(match field {
        FieldPath::TaskRange => {
            let old = agent.range;
            agent.range = numeric(field, old, m, MIN_RANGE_M, f64::INFINITY)?;
            (old.into(), agent.range.into())
        }
        FieldPath::TaskReward => {
            let old = agent.reward;
            agent.reward = numeric(field, old, m, 0.0, f64::INFINITY)?;
            (old.into(), agent.reward.into())
        }
        FieldPath::TaskUCredit => {
            let old = agent.u_credit;
            agent.u_credit = numeric(field, old, m, 0.0, MAX_CREDIT)?;
            (old.into(), agent.u_credit.into())
        }
        FieldPath::TaskPrio => {
            let old = agent.prio;
            agent.prio = numeric(field, old as f64, m, 0.0, MAX_PRIO as f64)?.round() as u8;
            (old.into(), agent.prio.into())
        }
        FieldPath::TaskFormat => match (&m.action, &m.amount) {
            (MutationAction::Set, Amount::Text(s)) if !s.is_empty() => {
                let old = std::mem::replace(&mut agent.format, s.clone());
                (old.into(), agent.format.clone().into())
            }
            (MutationAction::Set, other) => {
                return Err(AgentError::OutOfDomain { field, amount: format!("{other:?}") })
            }
            (action, _) => return Err(AgentError::UnsupportedAction { field, action: *action }),
        },
        FieldPath::TaskSubmitState => match (&m.action, &m.amount) {
            (MutationAction::Set, Amount::Flag(flag)) => {
                let old = serde_json::to_value(&agent.submit_state).unwrap_or(Value::Null);
                agent.submit_state.values_mut().for_each(|v| *v = *flag);
                (old, serde_json::to_value(&agent.submit_state).unwrap_or(Value::Null))
            }
            (MutationAction::Set, other) => {
                return Err(AgentError::OutOfDomain { field, amount: format!("{other:?}") })
            }
            (action, _) => return Err(AgentError::UnsupportedAction { field, action: *action }),
        },
        FieldPath::UserCredit => unreachable!("user field routed to user agent"),
    })
}

/// Resolves a numeric mutation. Increase/decrease amounts must be
/// non-negative; set values must already lie in `[lo, hi]`. Arithmetic
/// results are clamped into `[lo, hi]`.
fn numeric(field: FieldPath, current: f64, m: &Mutation, lo: f64, hi: f64) -> Result<f64, AgentError> {
    let out_of_domain = |amount: &Amount| AgentError::OutOfDomain { field, amount: format!("{amount:?}") };
    let step = match &m.amount {
        Amount::Absolute(v) => *v,
        Amount::Ratio(r) => {
            if m.action == MutationAction::Set {
                return Err(AgentError::UnsupportedAction { field, action: m.action });
            }
            r * current
        }
        other => return Err(out_of_domain(other)),
    };
    if !step.is_finite() {
        return Err(out_of_domain(&m.amount));
    }
    let value = match m.action {
        MutationAction::Set => {
            if step < lo || step > hi {
                return Err(out_of_domain(&m.amount));
            }
            step
        }
        MutationAction::Increase | MutationAction::Decrease if step < 0.0 => return Err(out_of_domain(&m.amount)),
        MutationAction::Increase => current + step,
        MutationAction::Decrease => current - step,
    };
    Ok(value.clamp(lo, hi))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeRef {
    Task(Tid),
    Process(Tpid),
    Environment,
    User(UserId),
    Device(DeviceId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    CandidateOf,
    LocatedNear,
    OwnsDevice,
    ConstrainedBy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrgEdge {
    pub from: NodeRef,
    pub to: NodeRef,
    pub relation: Relation,
}

impl TrgEdge {
    fn new(from: NodeRef, to: NodeRef, relation: Relation) -> Self {
        TrgEdge { from, to, relation }
    }
}

/// Per-task subgraph of the agent store used for strategy selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResourceGraph {
    pub root: Tid,
    pub task: TaskAgent,
    pub process: ProcessAgent,
    pub environment: EnvironmentAgent,
    pub users: Vec<UserAgent>,
    pub devices: Vec<DeviceAgent>,
    pub edges: Vec<TrgEdge>,
}

impl TaskResourceGraph {
    pub fn nodes(&self) -> Vec<NodeRef> {
        let mut nodes = vec![NodeRef::Task(self.root), NodeRef::Process(self.process.tpid), NodeRef::Environment];
        nodes.extend(self.users.iter().map(|u| NodeRef::User(u.user_id.clone())));
        nodes.extend(self.devices.iter().map(|d| NodeRef::Device(d.device_id.clone())));
        nodes
    }

    pub fn vector(&self) -> &[f64] {
        &self.task.task_info.vector
    }

    /// Every edge endpoint is a node of the graph.
    pub fn is_well_formed(&self) -> bool {
        let nodes: BTreeSet<NodeRef> = self.nodes().into_iter().collect();
        self.task.task_id == self.root
            && self.process.task_id == self.root
            && self.edges.iter().all(|e| nodes.contains(&e.from) && nodes.contains(&e.to))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KernelConfig;

    fn store() -> AgentStore {
        let cfg = KernelConfig::default();
        AgentStore::new(cfg.alarm_thresholds, cfg.availability)
    }

    pub(crate) fn task_agent(tid: u64) -> TaskAgent {
        TaskAgent {
            task_id: Tid(tid),
            tpid: Tpid(tid),
            process_state: TaskPhase::Allocation,
            prio: 8,
            task_info: TaskInfo::default(),
            device_num: 0,
            device_ids: Vec::new(),
            sensing_data: None,
            range: 1000.0,
            reward: 5.0,
            format: "jpeg".into(),
            u_credit: 0.0,
            submit_state: BTreeMap::new(),
            correction_bit: Vec::new(),
        }
    }

    fn report(id: &str, power: f64, usage: f64) -> DeviceStatusReport {
        DeviceStatusReport {
            device_id: Some(id.into()),
            remaining_power: Some(power),
            usage: Some(usage),
            ..Default::default()
        }
    }

    #[test]
    fn device_availability() {
        let mut s = store();
        assert!(s.register_device(&report("d1", 80.0, 10.0)).unwrap().availability);
        assert!(!s.register_device(&report("d1", 2.0, 10.0)).unwrap().availability);
        assert!(!s.register_device(&report("d2", 50.0, 96.0)).unwrap().availability);
        // floor is inclusive
        assert!(s.register_device(&report("d3", 5.0, 95.0)).unwrap().availability);
        let mut r = report("d1", 1.0, 1.0);
        r.remaining_power = None;
        assert_eq!(s.register_device(&r), Err(AgentError::MalformedStatus("remaining_power")));
        assert_eq!(s.register_device(&report("d1", 120.0, 1.0)), Err(AgentError::MalformedStatus("remaining_power")));
        assert_eq!(s.devices.len(), 3);
    }

    #[test]
    fn environment_alarms() {
        let mut s = store();
        let snap = |cpu, storage| EnvSnapshot {
            cpu_count: 8,
            cpu_util: cpu,
            memory_used: 10.0,
            storage_used: storage,
            disk_free: 1,
        };
        assert!(matches!(s.update_environment(&snap(95.0, 10.0)).as_slice(), [Alarm::Cpu { .. }]));
        assert!(s.update_environment(&snap(10.0, 10.0)).is_empty());
        assert_eq!(s.update_environment(&snap(99.0, 99.0)).len(), 2);
        assert_eq!(s.alarm_log.len(), 3);
    }

    #[test]
    fn mutation_examples() {
        let mut s = store();
        s.insert_task(task_agent(1), ProcessAgent::new(Tpid(1), Tid(1), Policy::Fcfs, 8, 0));
        s.upsert_user(UserAgent::new("u1", GeoPoint::default(), 10.0));

        let inc = Mutation {
            agent: AgentRef::Task(Tid(1)),
            field: FieldPath::TaskReward,
            action: MutationAction::Increase,
            amount: Amount::Absolute(10.0),
        };
        s.apply_mutation(&inc, Some(Tid(1)), Some("No.3")).unwrap();
        assert_eq!(s.tasks[&Tid(1)].reward, 15.0);

        let dec = Mutation {
            agent: AgentRef::User(UserId::new("u1")),
            field: FieldPath::UserCredit,
            action: MutationAction::Decrease,
            amount: Amount::Absolute(20.0),
        };
        s.apply_mutation(&dec, Some(Tid(1)), Some("No.33")).unwrap();
        assert_eq!(s.users[&UserId::new("u1")].credit, 0.0);

        assert_eq!(
            "Task-agent.nonexistent".parse::<FieldPath>(),
            Err(AgentError::UnknownField("Task-agent.nonexistent".into()))
        );
        assert_eq!(s.mutation_log.len(), 2);
        assert_eq!(s.mutation_log[0].on.as_deref(), Some("No.3"));
    }

    #[test]
    fn negative_step_is_out_of_domain() {
        let mut s = store();
        s.insert_task(task_agent(1), ProcessAgent::new(Tpid(1), Tid(1), Policy::Fcfs, 8, 0));
        let m = Mutation {
            agent: AgentRef::Task(Tid(1)),
            field: FieldPath::TaskReward,
            action: MutationAction::Increase,
            amount: Amount::Absolute(-3.0),
        };
        assert!(matches!(s.apply_mutation(&m, None, None), Err(AgentError::OutOfDomain { .. })));
        let m = Mutation { action: MutationAction::Set, amount: Amount::Absolute(-1.0), ..m };
        assert!(matches!(s.apply_mutation(&m, None, None), Err(AgentError::OutOfDomain { .. })));
        assert!(s.mutation_log.is_empty());
    }

    #[test]
    fn process_state_boost_restores() {
        let mut pa = ProcessAgent::new(Tpid(1), Tid(1), Policy::FeedbackPriority, 7, 0);
        pa.set_state(TaskPhase::Feedback, BoostDirection::Urgent);
        assert_eq!(pa.effective_prio, 5);
        pa.set_state(TaskPhase::Allocation, BoostDirection::Urgent);
        assert_eq!(pa.effective_prio, 7);
    }
}
