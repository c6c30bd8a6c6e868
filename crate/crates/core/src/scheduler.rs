//! Ready queues for task processes.
//!
//! Five policies are supported: FCFS, round-robin, static priority,
//! highest-response-ratio-next and feedback priority. Priority values run
//! 0..=15 with 0 the most urgent.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{ProcessAgent, Tpid};
use crate::task::TaskPhase;

pub const MAX_PRIO: u8 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "FCFS")]
    Fcfs,
    RoundRobin,
    Priority,
    #[serde(rename = "HRRN")]
    Hrrn,
    FeedbackPriority,
}

impl Policy {
    pub const ALL: [Policy; 5] =
        [Policy::Fcfs, Policy::RoundRobin, Policy::Priority, Policy::Hrrn, Policy::FeedbackPriority];

    pub fn parse(s: &str) -> Option<Policy> {
        match s {
            "FCFS" | "fcfs" => Some(Policy::Fcfs),
            "RoundRobin" | "round-robin" | "rr" => Some(Policy::RoundRobin),
            "Priority" | "priority" => Some(Policy::Priority),
            "HRRN" | "hrrn" => Some(Policy::Hrrn),
            "FeedbackPriority" | "feedback-priority" => Some(Policy::FeedbackPriority),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::Fcfs => "FCFS",
            Policy::RoundRobin => "RoundRobin",
            Policy::Priority => "Priority",
            Policy::Hrrn => "HRRN",
            Policy::FeedbackPriority => "FeedbackPriority",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the feedback boost moves the numeric priority value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoostDirection {
    /// Value decreases by two (more urgent), clamped at 0.
    Urgent,
    /// Value increases by two, clamped at 15.
    Literal,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("ready queue is empty")]
    EmptyQueue,
    #[error("expected service time must be positive, got {0}")]
    NonPositiveService(f64),
    #[error("waiting time must be non-negative, got {0}")]
    NegativeWait(f64),
    #[error("process is not in the feedback phase")]
    NotInFeedback,
    #[error("round-robin quantum must be positive")]
    ZeroQuantum,
}

/// `R = (w + s) / s`.
pub fn response_ratio(wait: f64, service: f64) -> Result<f64, SchedulerError> {
    if service.is_nan() || service <= 0.0 {
        return Err(SchedulerError::NonPositiveService(service));
    }
    if wait.is_nan() || wait < 0.0 {
        return Err(SchedulerError::NegativeWait(wait));
    }
    Ok((wait + service) / service)
}

pub fn boosted_prio(prio: u8, direction: BoostDirection) -> u8 {
    match direction {
        BoostDirection::Urgent => prio.saturating_sub(2),
        BoostDirection::Literal => prio.saturating_add(2).min(MAX_PRIO),
    }
}

/// Returns a copy of `pa` with its effective priority boosted. The original
/// `process_prio` is kept so the boost can be undone on leaving Feedback.
pub fn boost_feedback(pa: &ProcessAgent, direction: BoostDirection) -> Result<ProcessAgent, SchedulerError> {
    if pa.process_state != TaskPhase::Feedback {
        return Err(SchedulerError::NotInFeedback);
    }
    let mut out = pa.clone();
    out.effective_prio = boosted_prio(pa.process_prio, direction);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub tpid: Tpid,
    pub arrival: u64,
    /// Expected service duration, strictly positive.
    pub service: u64,
    pub prio: u8,
    pub effective_prio: u8,
    pub served: u64,
    seq: u64,
}

impl QueueEntry {
    pub fn new(tpid: Tpid, arrival: u64, service: u64, prio: u8) -> Self {
        QueueEntry { tpid, arrival, service: service.max(1), prio, effective_prio: prio, served: 0, seq: 0 }
    }

    pub fn from_agent(pa: &ProcessAgent) -> Self {
        QueueEntry {
            tpid: pa.tpid,
            arrival: pa.arrival_time,
            service: pa.expected_service.max(1),
            prio: pa.process_prio,
            effective_prio: pa.effective_prio,
            served: pa.served_time,
            seq: 0,
        }
    }

    pub fn wait(&self, now: u64) -> u64 {
        now.saturating_sub(self.arrival)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReadyQueue {
    policy: Policy,
    quantum: u64,
    entries: Vec<QueueEntry>,
    next_seq: u64,
}

impl ReadyQueue {
    pub fn new(policy: Policy, quantum: u64) -> Result<Self, SchedulerError> {
        if quantum == 0 {
            return Err(SchedulerError::ZeroQuantum);
        }
        Ok(ReadyQueue { policy, quantum, entries: Vec::new(), next_seq: 0 })
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn quantum(&self) -> u64 {
        self.quantum
    }

    pub fn push(&mut self, mut entry: QueueEntry) {
        entry.seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn contains(&self, tpid: Tpid) -> bool {
        self.entries.iter().any(|e| e.tpid == tpid)
    }

    pub fn remove(&mut self, tpid: Tpid) -> Option<QueueEntry> {
        let idx = self.entries.iter().position(|e| e.tpid == tpid)?;
        Some(self.entries.remove(idx))
    }

    /// Updates the effective priority of a queued process.
    pub fn set_effective_prio(&mut self, tpid: Tpid, prio: u8) -> bool {
        match self.entries.iter_mut().find(|e| e.tpid == tpid) {
            Some(e) => {
                e.effective_prio = prio.min(MAX_PRIO);
                true
            }
            None => false,
        }
    }

    /// Selects the next process. Round-robin keeps the process queued at the
    /// tail after charging it one quantum; every other policy dequeues it.
    pub fn next(&mut self, now: u64) -> Result<Tpid, SchedulerError> {
        let (tpid, _) = self.next_entry(now)?;
        Ok(tpid)
    }

    /// Like [`ReadyQueue::next`] but also returns the entry as it was when
    /// selected.
    pub fn next_entry(&mut self, now: u64) -> Result<(Tpid, QueueEntry), SchedulerError> {
        if self.entries.is_empty() {
            return Err(SchedulerError::EmptyQueue);
        }
        let idx = match self.policy {
            Policy::Fcfs => self.argmin_by(|e| (e.arrival, e.seq)),
            Policy::Priority => self.argmin_by(|e| (e.prio as u64, e.seq)),
            Policy::FeedbackPriority => self.argmin_by(|e| (e.effective_prio as u64, e.seq)),
            Policy::RoundRobin => self.argmin_by(|e| (e.seq, 0)),
            Policy::Hrrn => {
                let mut best = 0;
                let mut best_r = f64::NEG_INFINITY;
                for (i, e) in self.entries.iter().enumerate() {
                    // service is kept >= 1, so the ratio is always defined
                    let r = response_ratio(e.wait(now) as f64, e.service as f64)?;
                    if r > best_r || (r == best_r && e.seq < self.entries[best].seq) {
                        best = i;
                        best_r = r;
                    }
                }
                best
            }
        };
        let entry = self.entries.remove(idx);
        let tpid = entry.tpid;
        if self.policy == Policy::RoundRobin {
            let mut requeued = entry.clone();
            requeued.served += self.quantum;
            self.push(requeued);
        }
        Ok((tpid, entry))
    }

    fn argmin_by<K: Ord>(&self, key: impl Fn(&QueueEntry) -> K) -> usize {
        self.entries.iter().enumerate().min_by_key(|(_, e)| key(e)).map(|(i, _)| i).expect("queue checked non-empty")
    }
}

/// One ready queue per policy; dispatch rotates across non-empty queues in
/// policy order so no policy class starves another.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scheduler {
    queues: BTreeMap<Policy, ReadyQueue>,
    cursor: usize,
}

impl Scheduler {
    pub fn new(quantum: u64) -> Result<Self, SchedulerError> {
        let mut queues = BTreeMap::new();
        for p in Policy::ALL {
            queues.insert(p, ReadyQueue::new(p, quantum)?);
        }
        Ok(Scheduler { queues, cursor: 0 })
    }

    pub fn enqueue(&mut self, pa: &ProcessAgent) {
        let q = self.queues.get_mut(&pa.algorithm_flag).expect("every policy has a queue");
        q.push(QueueEntry::from_agent(pa));
    }

    pub fn queue(&self, policy: Policy) -> &ReadyQueue {
        &self.queues[&policy]
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(ReadyQueue::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn remove(&mut self, tpid: Tpid) -> Option<QueueEntry> {
        self.queues.values_mut().find_map(|q| q.remove(tpid))
    }

    pub fn set_effective_prio(&mut self, tpid: Tpid, prio: u8) {
        for q in self.queues.values_mut() {
            if q.set_effective_prio(tpid, prio) {
                return;
            }
        }
    }

    /// Takes the next process off the ready queues. Round-robin entries are
    /// dequeued here too: the kernel runs dispatched work to completion.
    pub fn dispatch(&mut self, now: u64) -> Option<(Policy, QueueEntry)> {
        let n = Policy::ALL.len();
        for step in 0..n {
            let policy = Policy::ALL[(self.cursor + step) % n];
            let q = self.queues.get_mut(&policy).expect("queue");
            if q.is_empty() {
                continue;
            }
            let (tpid, entry) = q.next_entry(now).expect("non-empty");
            if policy == Policy::RoundRobin {
                q.remove(tpid);
            }
            self.cursor = (self.cursor + step + 1) % n;
            return Some((policy, entry));
        }
        None
    }
}
