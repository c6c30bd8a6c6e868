//! Deterministic scenario simulator.
//!
//! Scripted users and publishers talk to the kernel through the loopback
//! transport, one tick at a time. Publishers evaluate results with
//! evaluator profiles declared in the scenario.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::{DeviceStatusReport, EnvSnapshot, GeoPoint};
use crate::config::{CostModel, KernelConfig, SchedulerConfig};
use crate::kernel::{FeedbackPayload, Kernel, KernelError};
use crate::protocol::{ConnId, Coordinator, Kind, Loopback, Message};
use crate::quality::Rn;
use crate::task::{RawTaskInput, TaskPhase, Tid, UserId};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("io failure on {path}: {detail}")]
    IoFailure { path: PathBuf, detail: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SimError + '_ {
    move |e| SimError::IoFailure { path: path.to_path_buf(), detail: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub id: String,
    pub location: GeoPoint,
    #[serde(default)]
    pub interests: Vec<String>,
    #[serde(default = "default_credit")]
    pub credit: f64,
}

fn default_credit() -> f64 {
    80.0
}

/// Scripted publisher behaviour: scores start at `initial` and rise by
/// `improvement` per correction round, capped at `caps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorProfile {
    pub initial: [f64; 5],
    #[serde(default)]
    pub improvement: [f64; 5],
    #[serde(default = "unit")]
    pub caps: [f64; 5],
    #[serde(default)]
    pub weights: Option<[f64; 5]>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub causes: Vec<Rn>,
    #[serde(default)]
    pub format: Option<String>,
}

fn unit() -> [f64; 5] {
    [1.0; 5]
}

impl EvaluatorProfile {
    /// Steady improver with a single per-principle step.
    pub fn linear(start: f64, step: f64) -> Self {
        EvaluatorProfile {
            initial: [start; 5],
            improvement: [step; 5],
            caps: unit(),
            weights: None,
            lambda: 0.0,
            text: String::new(),
            causes: vec![Rn(0x1002)],
            format: Some("jpeg".into()),
        }
    }

    pub fn scores(&self, round: u32) -> [f64; 5] {
        std::array::from_fn(|k| (self.initial[k] + self.improvement[k] * round as f64).clamp(0.0, self.caps[k]))
    }

    pub fn feedback(&self, round: u32) -> FeedbackPayload {
        let mut p = FeedbackPayload::ratios(self.scores(round));
        p.caps = self.caps;
        p.weights = self.weights;
        p.lambda = self.lambda;
        p.text = self.text.clone();
        p.causes = self.causes.clone();
        p.format = self.format.clone();
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTask {
    #[serde(default)]
    pub at: u64,
    pub profile: String,
    #[serde(flatten)]
    pub input: RawTaskInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvEvent {
    pub at: u64,
    #[serde(flatten)]
    pub snapshot: EnvSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub duration_ticks: u64,
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub devices: Vec<DeviceStatusReport>,
    pub profiles: BTreeMap<String, EvaluatorProfile>,
    pub tasks: Vec<ScenarioTask>,
    #[serde(default)]
    pub environment: Vec<EnvEvent>,
    /// Replaces the kernel's scheduler settings for this run.
    #[serde(default)]
    pub scheduler: Option<SchedulerConfig>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, SimError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let s: Scenario = serde_json::from_str(&text).map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut ids = BTreeSet::new();
        for u in &self.users {
            if !ids.insert(u.id.as_str()) {
                return Err(SimError::ScenarioInvalid(format!("duplicate user {}", u.id)));
            }
        }
        for d in &self.devices {
            if let Some(owner) = &d.owner {
                if !ids.contains(owner.as_str()) {
                    return Err(SimError::ScenarioInvalid(format!("device owner {owner} undefined")));
                }
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if !ids.contains(t.input.publisher.0.as_str()) {
                return Err(SimError::ScenarioInvalid(format!("task {i}: publisher {} undefined", t.input.publisher)));
            }
            if !self.profiles.contains_key(&t.profile) {
                return Err(SimError::ScenarioInvalid(format!("task {i}: profile {} undefined", t.profile)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub tid: u64,
    pub classification: String,
    pub strategy_id: Option<u32>,
    pub published_at: u64,
    pub finished_at: Option<u64>,
    pub response_ticks: Option<u64>,
    pub rounds: u32,
    pub final_q: Option<f64>,
    pub outcome: String,
    pub assignment_size: usize,
    pub queue_wait: u64,
    pub compensated_from: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub dispatches: u64,
    pub total_wait: u64,
    pub max_wait: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub seed: u64,
    pub ticks: u64,
    pub messages: u64,
    pub alarms: u64,
    /// Publications refused outright (no task created).
    pub rejected: u64,
    pub tasks: Vec<TaskMetrics>,
    pub queue_waits: BTreeMap<String, PolicyStats>,
}

impl MetricsBundle {
    pub fn count(&self, outcome: &str) -> usize {
        self.tasks.iter().filter(|t| t.outcome == outcome).count()
    }
}

pub struct SimRun {
    pub metrics: MetricsBundle,
    /// Final agent-state dump.
    pub state: Value,
    pub kernel: Kernel,
}

struct Driver {
    lb: Loopback,
    conns: BTreeMap<UserId, ConnId>,
    /// Items each user submitted per task in the latest round.
    submitted: BTreeMap<(Tid, UserId), u32>,
    items_per_submit: u32,
}

impl Driver {
    fn new(kernel: Kernel) -> Self {
        let mut coord = Coordinator::new(kernel);
        coord.set_auto_clock(false);
        Driver { lb: Loopback::new(coord), conns: BTreeMap::new(), submitted: BTreeMap::new(), items_per_submit: 1 }
    }

    fn kernel(&mut self) -> &mut Kernel {
        self.lb.coordinator_mut().kernel_mut()
    }

    fn join(&mut self, user: &UserSpec, devices: &[DeviceStatusReport]) -> Result<(), SimError> {
        let conn = self.conns.len() as ConnId + 1;
        let id = UserId::new(user.id.clone());
        self.conns.insert(id, conn);
        self.lb.connect(conn);
        let owned: Vec<&DeviceStatusReport> =
            devices.iter().filter(|d| d.owner.as_deref() == Some(user.id.as_str())).collect();
        let r = self.lb.request(
            conn,
            Kind::ListTasks,
            None,
            json!({"user": user.id, "profile": {"location": user.location, "interests": user.interests, "credit": user.credit, "devices": owned}}),
        );
        expect_ok(&r)
    }

    fn conn(&self, user: &UserId) -> ConnId {
        self.conns[user]
    }

    /// Answers pushes until none remain. Participants upload on every
    /// assignment and re-upload when asked to resubmit.
    fn pump(&mut self) -> Result<Vec<(UserId, Tid, u32)>, SimError> {
        let mut uploads = Vec::new();
        while self.lb.has_pushes() {
            let users: Vec<(UserId, ConnId)> = self.conns.iter().map(|(u, c)| (u.clone(), *c)).collect();
            for (user, conn) in users {
                while let Some(push) = self.lb.next_push(conn) {
                    let Some(tid) = push.tid else { continue };
                    let resubmit = push.kind == Kind::CorrectionNotice
                        && push.payload["assigned"] == json!(true)
                        && push.payload["action"] == json!("resubmit");
                    let n = match push.kind {
                        Kind::AssignNotice => self.items_per_submit,
                        _ if resubmit => {
                            self.submitted.get(&(tid, user.clone())).copied().unwrap_or(self.items_per_submit)
                        }
                        _ => 0,
                    };
                    let mut sent = 0;
                    for i in 0..n {
                        let r = self.lb.request(
                            conn,
                            Kind::SubmitResult,
                            Some(tid),
                            json!({"user": user, "value": format!("item-{i}")}),
                        );
                        if r.kind == Kind::Error {
                            break;
                        }
                        sent += 1;
                    }
                    if sent > 0 {
                        self.submitted.insert((tid, user.clone()), sent);
                        uploads.push((user.clone(), tid, sent));
                    }
                }
            }
        }
        Ok(uploads)
    }
}

fn expect_ok(m: &Message) -> Result<(), SimError> {
    match m.error_code() {
        Some(code) => Err(SimError::ScenarioInvalid(format!("{code}: {}", m.payload["detail"]))),
        None => Ok(()),
    }
}

/// Runs a scenario to completion (or its tick budget) and collects metrics.
pub fn run_scenario(scenario: &Scenario, mut cfg: KernelConfig) -> Result<SimRun, SimError> {
    scenario.validate()?;
    if let Some(s) = &scenario.scheduler {
        cfg.scheduler = s.clone();
    }
    let mut d = Driver::new(Kernel::new(cfg, scenario.seed)?);
    for u in &scenario.users {
        d.join(u, &scenario.devices)?;
    }
    for dev in scenario.devices.iter().filter(|d| d.owner.is_none()) {
        d.kernel().register_device(dev)?;
    }

    let mut order: Vec<usize> = (0..scenario.tasks.len()).collect();
    order.sort_by_key(|&i| (scenario.tasks[i].at, i));
    let mut next = 0;
    let mut profiles: BTreeMap<Tid, &EvaluatorProfile> = BTreeMap::new();
    let mut evaluated: BTreeMap<Tid, u32> = BTreeMap::new();
    let mut gave_up: BTreeSet<Tid> = BTreeSet::new();
    let mut alarms = 0u64;
    let mut rejected = 0u64;
    let mut ticks = 0;

    for t in 0..=scenario.duration_ticks {
        ticks = t;
        d.kernel().set_now(t);
        for ev in scenario.environment.iter().filter(|e| e.at == t) {
            alarms += d.kernel().update_environment(&ev.snapshot).len() as u64;
        }
        while next < order.len() && scenario.tasks[order[next]].at <= t {
            let task = &scenario.tasks[order[next]];
            next += 1;
            let conn = d.conn(&task.input.publisher);
            let r =
                d.lb.request(conn, Kind::Publish, None, serde_json::to_value(&task.input).expect("task serializes"));
            match r.tid {
                Some(tid) => {
                    profiles.insert(tid, &scenario.profiles[&task.profile]);
                }
                None => rejected += 1,
            }
        }
        d.pump()?;
        d.kernel().tick()?;
        d.pump()?;

        let waiting: Vec<Tid> = profiles
            .keys()
            .copied()
            .filter(|tid| {
                !gave_up.contains(tid) && d.lb.coordinator().kernel().phase(*tid) == Some(TaskPhase::Feedback)
            })
            .collect();
        for tid in waiting {
            let publisher = d.lb.coordinator().kernel().tasks().spec(tid).expect("task").publisher.clone();
            let round = evaluated.get(&tid).copied().unwrap_or(0);
            let mut payload = serde_json::to_value(profiles[&tid].feedback(round)).expect("feedback serializes");
            payload["user"] = json!(publisher);
            let conn = d.conn(&publisher);
            let r = d.lb.request(conn, Kind::Feedback, Some(tid), payload);
            match r.error_code() {
                None => {
                    evaluated.insert(tid, round + 1);
                }
                Some("MaxRoundsExceeded") => {
                    gave_up.insert(tid);
                }
                Some(_) => return Err(SimError::ScenarioInvalid(format!("feedback on {tid}: {}", r.payload))),
            }
        }
        d.pump()?;

        let settled = profiles.keys().all(|tid| {
            gave_up.contains(tid) || d.lb.coordinator().kernel().phase(*tid) == Some(TaskPhase::Termination)
        });
        if next == order.len() && settled {
            break;
        }
    }

    let messages = d.lb.messages;
    let kernel = d.lb.into_coordinator().into_kernel();
    let metrics = collect(&kernel, scenario.seed, ticks, messages, alarms, rejected);
    Ok(SimRun { state: kernel.state_dump(), metrics, kernel })
}

fn collect(kernel: &Kernel, seed: u64, ticks: u64, messages: u64, alarms: u64, rejected: u64) -> MetricsBundle {
    let mut bundle = MetricsBundle { seed, ticks, messages, alarms, rejected, ..Default::default() };
    for (spec, phase) in kernel.tasks().iter() {
        let Some(rt) = kernel.runtime(spec.tid) else { continue };
        for (policy, wait) in &rt.queue_waits {
            let s = bundle.queue_waits.entry(policy.name().to_string()).or_default();
            s.dispatches += 1;
            s.total_wait += wait;
            s.max_wait = s.max_wait.max(*wait);
        }
        let outcome = if phase == TaskPhase::Termination {
            "terminated"
        } else if rt.gave_up {
            "max-rounds"
        } else {
            "open"
        };
        bundle.tasks.push(TaskMetrics {
            tid: spec.tid.0,
            classification: spec.classification.clone(),
            strategy_id: rt.strategy,
            published_at: rt.published_at,
            finished_at: rt.finished_at,
            response_ticks: rt.finished_at.map(|f| f - rt.published_at),
            rounds: rt.rounds,
            final_q: rt.history.last().copied(),
            outcome: outcome.to_string(),
            assignment_size: rt.assignment_sizes.last().copied().unwrap_or(0),
            queue_wait: rt.queue_waits.iter().map(|(_, w)| w).sum(),
            compensated_from: rt.compensated_from.map(|t| t.0),
        });
    }
    bundle
}

const TASK_HEADER: [&str; 12] = [
    "tid",
    "classification",
    "strategy_id",
    "published_at",
    "finished_at",
    "response_ticks",
    "rounds",
    "final_q",
    "outcome",
    "assignment_size",
    "queue_wait",
    "compensated_from",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `tasks.csv`, `queue_waits.csv` and `summary.json` into `dir`.
pub fn emit_metrics(bundle: &MetricsBundle, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tasks = dir.join("tasks.csv");
    let mut w = csv::Writer::from_path(&tasks).map_err(|e| csv_err(&tasks, e))?;
    w.write_record(TASK_HEADER).map_err(|e| csv_err(&tasks, e))?;
    for t in &bundle.tasks {
        w.write_record([
            t.tid.to_string(),
            t.classification.clone(),
            opt(t.strategy_id),
            t.published_at.to_string(),
            opt(t.finished_at),
            opt(t.response_ticks),
            t.rounds.to_string(),
            opt(t.final_q),
            t.outcome.clone(),
            t.assignment_size.to_string(),
            t.queue_wait.to_string(),
            opt(t.compensated_from),
        ])
        .map_err(|e| csv_err(&tasks, e))?;
    }
    w.flush().map_err(io_err(&tasks))?;

    let queues = dir.join("queue_waits.csv");
    let mut w = csv::Writer::from_path(&queues).map_err(|e| csv_err(&queues, e))?;
    w.write_record(["policy", "dispatches", "total_wait", "max_wait"]).map_err(|e| csv_err(&queues, e))?;
    for (policy, s) in &bundle.queue_waits {
        w.write_record([policy.clone(), s.dispatches.to_string(), s.total_wait.to_string(), s.max_wait.to_string()])
            .map_err(|e| csv_err(&queues, e))?;
    }
    w.flush().map_err(io_err(&queues))?;

    let summary = dir.join("summary.json");
    let rounds: Vec<u32> = bundle.tasks.iter().map(|t| t.rounds).collect();
    let body = json!({
        "seed": bundle.seed,
        "ticks": bundle.ticks,
        "messages": bundle.messages,
        "alarms": bundle.alarms,
        "rejected": bundle.rejected,
        "tasks": bundle.tasks.len(),
        "terminated": bundle.count("terminated"),
        "max_rounds": bundle.count("max-rounds"),
        "open": bundle.count("open"),
        "mean_rounds": if rounds.is_empty() { 0.0 } else { rounds.iter().sum::<u32>() as f64 / rounds.len() as f64 },
        "queue_waits": bundle.queue_waits,
    });
    write_json(&summary, &body)?;
    Ok(vec![tasks, queues, summary])
}

fn csv_err(path: &Path, e: csv::Error) -> SimError {
    SimError::IoFailure { path: path.to_path_buf(), detail: e.to_string() }
}

pub fn write_json(path: &Path, v: &Value) -> Result<(), SimError> {
    let text = serde_json::to_string_pretty(v).expect("json serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Result-correction cost comparison

/// One row of the cost comparison, in cost ticks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TroRow {
    pub n: u32,
    pub v: u32,
    /// Publisher fixes every result by hand.
    pub cost_a: f64,
    /// Kernel notifies participants, who fix their own results in parallel.
    pub cost_b: f64,
    pub notices: u32,
    pub resubmitted: u32,
}

/// Publisher-side correction: fixed preparation plus per-item handling of
/// all `n·V` results.
pub fn analytic_cost_a(n: u32, v: u32, m: &CostModel) -> f64 {
    m.zeta_a + m.eta_a * n as f64 * v as f64
}

/// Measures the kernel-mediated correction by running it. `n` participants
/// each upload `v` items; the publisher flags a format problem; every
/// notified participant re-uploads its own items. Participants work in
/// parallel, so the round lasts until the slowest one finishes.
pub fn simulate_cost_b(n: u32, v: u32, m: &CostModel, cfg: &KernelConfig) -> Result<TroRow, SimError> {
    if n == 0 || v == 0 {
        return Err(SimError::ScenarioInvalid("n and V must be at least 1".into()));
    }
    let mut d = Driver::new(Kernel::new(cfg.clone(), 0)?);
    d.items_per_submit = v;
    let topic = "photo-collection";
    d.join(
        &UserSpec { id: "publisher".into(), location: GeoPoint::new(5000.0, 5000.0), interests: vec![], credit: 80.0 },
        &[],
    )?;
    for i in 0..n {
        let spot = GeoPoint::new((i % 40) as f64, (i / 40) as f64);
        d.join(&UserSpec { id: format!("p{i:05}"), location: spot, interests: vec![topic.into()], credit: 80.0 }, &[])?;
    }
    let mut raw = RawTaskInput::new("publisher", "collect photos of the lake", "sensing-collection");
    raw.scale = Some(n * v);
    raw.discrete.topic = Some(topic.into());
    raw.discrete.location = Some(GeoPoint::new(0.0, 0.0));
    raw.discrete.radius_m = Some(1000.0);
    raw.discrete.participant_count = Some(n);
    let pc = d.conn(&UserId::new("publisher"));
    let r = d.lb.request(pc, Kind::Publish, None, serde_json::to_value(&raw).expect("serializes"));
    expect_ok(&r)?;
    let tid = r.tid.expect("published");
    d.pump()?;
    phase_is(&d, tid, TaskPhase::Feedback)?;

    let mut fb = FeedbackPayload::ratios([0.5; 5]);
    fb.causes = vec![Rn(0x1002)];
    fb.format = Some("jpeg".into());
    let mut payload = serde_json::to_value(&fb).expect("serializes");
    payload["user"] = json!("publisher");
    let r = d.lb.request(pc, Kind::Feedback, Some(tid), payload);
    expect_ok(&r)?;
    let notices = n;
    let uploads = d.pump()?;
    phase_is(&d, tid, TaskPhase::Feedback)?;

    // every participant starts on the notice and takes eta_b per own item
    let slowest = uploads.iter().filter(|(_, t, _)| *t == tid).map(|(_, _, k)| *k).max().unwrap_or(0);
    let resubmitted = uploads.iter().map(|(_, _, k)| *k).sum();
    let cost_b = m.zeta_b + m.eta_b * slowest as f64;
    Ok(TroRow { n, v, cost_a: analytic_cost_a(n, v, m), cost_b, notices, resubmitted })
}

fn phase_is(d: &Driver, tid: Tid, want: TaskPhase) -> Result<(), SimError> {
    let got = d.lb.coordinator().kernel().phase(tid);
    if got != Some(want) {
        return Err(SimError::ScenarioInvalid(format!("task {tid} in {got:?}, expected {want:?}")));
    }
    Ok(())
}

pub fn compare_tro_costs(ns: &[u32], v: u32, m: &CostModel, cfg: &KernelConfig) -> Result<Vec<TroRow>, SimError> {
    ns.iter().map(|&n| simulate_cost_b(n, v, m, cfg)).collect()
}

/// Least-squares slope of `y` over `x`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Writes `tro.csv` and a log-scale `tro.svg` line chart.
pub fn emit_tro(rows: &[TroRow], dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_path = dir.join("tro.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    w.write_record(["n", "v", "cost_a", "cost_b", "notices", "resubmitted"]).map_err(|e| csv_err(&csv_path, e))?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.v.to_string(),
            r.cost_a.to_string(),
            r.cost_b.to_string(),
            r.notices.to_string(),
            r.resubmitted.to_string(),
        ])
        .map_err(|e| csv_err(&csv_path, e))?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    let svg_path = dir.join("tro.svg");
    fs::write(&svg_path, tro_svg(rows)).map_err(io_err(&svg_path))?;
    Ok(vec![csv_path, svg_path])
}

fn tro_svg(rows: &[TroRow]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let lx = |n: u32| (n.max(1) as f64).log10();
    let ly = |c: f64| c.max(1.0).log10();
    let (x0, x1) = rows.iter().fold((f64::MAX, f64::MIN), |(a, b), r| (a.min(lx(r.n)), b.max(lx(r.n))));
    let y1 = rows.iter().map(|r| ly(r.cost_a).max(ly(r.cost_b))).fold(1.0, f64::max);
    let sx = |v: f64| pad + if x1 > x0 { (v - x0) / (x1 - x0) } else { 0.5 } * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - v / y1 * (h - 2.0 * pad);
    let line = |f: &dyn Fn(&TroRow) -> f64, color: &str| {
        let pts: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", sx(lx(r.n)), sy(ly(f(r))))).collect();
        format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "))
    };
    let labels: String = rows
        .iter()
        .map(|r| {
            format!(
                "<text x=\"{:.1}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">n={}</text>",
                sx(lx(r.n)),
                h - pad + 18.0,
                r.n
            )
        })
        .collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\
<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\
<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\
<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\
{a}{bb}{labels}\
<text x=\"{pad}\" y=\"30\" font-size=\"13\">log cost: publisher fixes all (red), kernel notifies (blue)</text></svg>\n",
        b = h - pad,
        r = w - pad,
        a = line(&|r| r.cost_a, "#c0392b"),
        bb = line(&|r| r.cost_b, "#2c6fbb"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(profile: EvaluatorProfile) -> Scenario {
        Scenario {
            seed: 3,
            duration_ticks: 200,
            users: vec![
                UserSpec { id: "pub".into(), location: GeoPoint::new(9000.0, 0.0), interests: vec![], credit: 80.0 },
                UserSpec { id: "a".into(), location: GeoPoint::new(10.0, 0.0), interests: vec![], credit: 80.0 },
                UserSpec { id: "b".into(), location: GeoPoint::new(20.0, 0.0), interests: vec![], credit: 80.0 },
                UserSpec { id: "c".into(), location: GeoPoint::new(30.0, 0.0), interests: vec![], credit: 80.0 },
            ],
            devices: vec![],
            profiles: BTreeMap::from([("p".to_string(), profile)]),
            tasks: vec![ScenarioTask {
                at: 1,
                profile: "p".into(),
                input: {
                    let mut raw = RawTaskInput::new("pub", "collect photos of the lake", "sensing-collection");
                    raw.scale = Some(3);
                    raw.discrete.location = Some(GeoPoint::new(0.0, 0.0));
                    raw
                },
            }],
            environment: vec![],
            scheduler: None,
        }
    }

    #[test]
    fn one_task_terminates() {
        let run = run_scenario(&scenario(EvaluatorProfile::linear(0.6, 0.1)), KernelConfig::default()).unwrap();
        assert_eq!(run.metrics.tasks.len(), 1);
        let t = &run.metrics.tasks[0];
        assert_eq!(t.outcome, "terminated");
        assert!((1..=3).contains(&t.rounds), "{t:?}");
        assert_eq!(t.assignment_size, 3);
    }

    #[test]
    fn undefined_reference_rejected() {
        let mut s = scenario(EvaluatorProfile::linear(0.6, 0.1));
        s.tasks[0].input.publisher = UserId::new("ghost");
        assert!(matches!(run_scenario(&s, KernelConfig::default()), Err(SimError::ScenarioInvalid(_))));
        let mut s = scenario(EvaluatorProfile::linear(0.6, 0.1));
        s.tasks[0].profile = "nope".into();
        assert!(matches!(s.validate(), Err(SimError::ScenarioInvalid(_))));
    }

    #[test]
    fn empty_bundle_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_metrics(&MetricsBundle::default(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("tasks.csv")).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("tid,classification"));
    }

    #[test]
    fn unwritable_path_fails() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, "x").unwrap();
        assert!(matches!(emit_metrics(&MetricsBundle::default(), &file.join("sub")), Err(SimError::IoFailure { .. })));
    }

    #[test]
    fn cost_b_flat_in_n() {
        let m = KernelConfig::default().cost_model;
        let a = simulate_cost_b(2, 3, &m, &KernelConfig::default()).unwrap();
        let b = simulate_cost_b(8, 3, &m, &KernelConfig::default()).unwrap();
        assert_eq!(a.cost_b, b.cost_b);
        assert_eq!(b.notices, 8);
        assert_eq!(b.resubmitted, 24);
        assert_eq!(a.cost_b, m.zeta_b + m.eta_b * 3.0);
    }
}
