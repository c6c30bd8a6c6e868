//! Strategy library, strategy selection and participant assignment.
//!
//! Strategy selection is a linear scorer over the task vector followed by a
//! temperature-scaled softmax. Each strategy has one weight row; the row of
//! the strategy used for a task is nudged by the observed outcome.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{TaskResourceGraph, UserAgent};
use crate::resolution::VectorSchema;
use crate::task::{Tid, UserId};

pub type StrategyId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("strategy library is empty")]
    EmptyLibrary,
    #[error("unknown strategy {0}")]
    UnknownStrategy(StrategyId),
    #[error("strategy {0} already exists")]
    DuplicateId(StrategyId),
    #[error("only {eligible} eligible participants for {requested} requested")]
    InsufficientParticipants { eligible: usize, requested: usize },
    #[error("target count must be at least 1")]
    ZeroTarget,
    #[error("outcome must be finite and within [-1, 1], got {0}")]
    InvalidOutcome(f64),
    #[error("weight row has {got} dims, schema has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown feature `{0}` in strategy params")]
    UnknownFeature(String),
    #[error("temperature must be positive")]
    NonPositiveTemperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Location,
    Interest,
    CreditFiltered,
    Random,
    GameTheory,
    Genetic,
}

impl StrategyKind {
    /// Kinds that run the shared greedy assigner instead of a dedicated one.
    pub fn is_simplified(self) -> bool {
        matches!(self, StrategyKind::GameTheory | StrategyKind::Genetic)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyParams {
    /// Initial applicability weights keyed by vector feature name.
    pub features: BTreeMap<String, f64>,
    /// Extra credit floor applied by credit-filtered strategies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_credit: Option<f64>,
}

/// One registry entry as stored in the strategy config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub strategy_id: StrategyId,
    pub name: String,
    pub kind: StrategyKind,
    #[serde(default)]
    pub params: StrategyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub strategy_id: StrategyId,
    pub name: String,
    pub kind: StrategyKind,
    pub params: StrategyParams,
    pub applicability: Vec<f64>,
    pub simplified: bool,
}

impl Strategy {
    pub fn from_spec(spec: &StrategySpec, schema: &VectorSchema) -> Result<Self, AssignmentError> {
        let mut applicability = vec![0.0; schema.dims()];
        let names = schema.feature_names();
        for (feature, w) in &spec.params.features {
            let idx = names
                .iter()
                .position(|n| n == feature)
                .ok_or_else(|| AssignmentError::UnknownFeature(feature.clone()))?;
            applicability[idx] = *w;
        }
        Ok(Strategy {
            strategy_id: spec.strategy_id,
            name: spec.name.clone(),
            kind: spec.kind,
            params: spec.params.clone(),
            applicability,
            simplified: spec.kind.is_simplified(),
        })
    }
}

/// The task assignment strategy library.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StrategyLibrary {
    strategies: BTreeMap<StrategyId, Strategy>,
}

impl StrategyLibrary {
    pub fn from_specs(specs: &[StrategySpec], schema: &VectorSchema) -> Result<Self, AssignmentError> {
        let mut lib = StrategyLibrary::default();
        for s in specs {
            if lib.strategies.insert(s.strategy_id, Strategy::from_spec(s, schema)?).is_some() {
                return Err(AssignmentError::DuplicateId(s.strategy_id));
            }
        }
        Ok(lib)
    }

    pub fn get(&self, id: StrategyId) -> Option<&Strategy> {
        self.strategies.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = StrategyId> + '_ {
        self.strategies.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }
}

/// Linear strategy-selection model: one weight row per strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SasModel {
    rows: BTreeMap<StrategyId, Vec<f64>>,
    dims: usize,
    pub temperature: f64,
    pub learning_rate: f64,
}

impl SasModel {
    pub fn new(
        library: &StrategyLibrary,
        dims: usize,
        temperature: f64,
        learning_rate: f64,
    ) -> Result<Self, AssignmentError> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(AssignmentError::NonPositiveTemperature);
        }
        let mut rows = BTreeMap::new();
        for s in library.strategies.values() {
            if s.applicability.len() != dims {
                return Err(AssignmentError::DimensionMismatch { expected: dims, got: s.applicability.len() });
            }
            rows.insert(s.strategy_id, s.applicability.clone());
        }
        Ok(SasModel { rows, dims, temperature, learning_rate })
    }

    pub fn row(&self, id: StrategyId) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn score(&self, id: StrategyId, vector: &[f64]) -> Option<f64> {
        self.rows.get(&id).map(|row| dot(row, vector))
    }

    /// Online update: `W[chosen] += lr * outcome * vector`. Other rows are
    /// left untouched.
    pub fn update(&mut self, chosen: StrategyId, vector: &[f64], outcome: f64) -> Result<(), AssignmentError> {
        if !outcome.is_finite() || !(-1.0..=1.0).contains(&outcome) {
            return Err(AssignmentError::InvalidOutcome(outcome));
        }
        if vector.len() != self.dims {
            return Err(AssignmentError::DimensionMismatch { expected: self.dims, got: vector.len() });
        }
        let row = self.rows.get_mut(&chosen).ok_or(AssignmentError::UnknownStrategy(chosen))?;
        let step = self.learning_rate * outcome;
        if step != 0.0 {
            for (w, x) in row.iter_mut().zip(vector) {
                *w += step * x;
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub strategy_id: StrategyId,
    /// `(strategy_id, probability)` in ascending id order.
    pub probabilities: Vec<(StrategyId, f64)>,
}

/// Picks the strategy with the highest score for the graph's task vector.
/// Ties go to the lowest strategy id.
pub fn select_strategy(
    trg: &TaskResourceGraph,
    model: &SasModel,
    library: &StrategyLibrary,
) -> Result<Selection, AssignmentError> {
    select_for_vector(trg.vector(), model, library)
}

pub fn select_for_vector(
    vector: &[f64],
    model: &SasModel,
    library: &StrategyLibrary,
) -> Result<Selection, AssignmentError> {
    if library.is_empty() {
        return Err(AssignmentError::EmptyLibrary);
    }
    if vector.len() != model.dims {
        return Err(AssignmentError::DimensionMismatch { expected: model.dims, got: vector.len() });
    }
    let mut scores = Vec::with_capacity(library.len());
    for id in library.ids() {
        let s = model.score(id, vector).ok_or(AssignmentError::UnknownStrategy(id))?;
        scores.push((id, s));
    }
    let mut best = scores[0];
    for &(id, s) in &scores[1..] {
        if s > best.1 {
            best = (id, s);
        }
    }
    let max = best.1;
    let exps: Vec<f64> = scores.iter().map(|(_, s)| ((s - max) / model.temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probabilities = scores.iter().zip(&exps).map(|((id, _), e)| (*id, e / total)).collect();
    Ok(Selection { strategy_id: best.0, probabilities })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignee {
    pub user_id: UserId,
    /// Higher is better. Location-ordered kinds report negative distance,
    /// interest-based reports the overlap count, random reports 0.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub task_id: Tid,
    pub selected_strategy_id: StrategyId,
    pub assignees: Vec<Assignee>,
}

impl AssignmentResult {
    pub fn user_ids(&self) -> Vec<UserId> {
        self.assignees.iter().map(|a| a.user_id.clone()).collect()
    }
}

/// Tags a task advertises for interest matching.
pub fn task_tags(trg: &TaskResourceGraph) -> BTreeSet<String> {
    let info = &trg.task.task_info;
    let mut tags: BTreeSet<String> = info.keywords.clone();
    if !info.topic.is_empty() {
        tags.insert(info.topic.clone());
    }
    if !info.classification.is_empty() {
        tags.insert(info.classification.clone());
    }
    tags
}

pub fn interest_overlap(user: &UserAgent, tags: &BTreeSet<String>) -> usize {
    user.interests.intersection(tags).count()
}

/// Distance from the task location, 0 when the task has none. `None` when
/// the user is outside the task range.
fn distance_within_range(trg: &TaskResourceGraph, user: &UserAgent) -> Option<f64> {
    match trg.task.task_info.point() {
        Some(c) => {
            let d = c.distance(&user.location);
            (d <= trg.task.range).then_some(d)
        }
        None => Some(0.0),
    }
}

/// Chooses up to `k` participants from the graph's candidates.
///
/// Every kind honours the task's `u_credit` floor and range. The random
/// baseline draws from `rng`.
pub fn assign<R: Rng + ?Sized>(
    trg: &TaskResourceGraph,
    strategy: &Strategy,
    k: usize,
    rng: &mut R,
) -> Result<AssignmentResult, AssignmentError> {
    if k == 0 {
        return Err(AssignmentError::ZeroTarget);
    }
    let mut floor = trg.task.u_credit;
    if strategy.kind == StrategyKind::CreditFiltered {
        floor = floor.max(strategy.params.min_credit.unwrap_or(0.0));
    }
    let tags = task_tags(trg);

    // (user, distance) for users passing range and credit filters, id order
    let mut pool: Vec<(&UserAgent, f64)> = trg
        .users
        .iter()
        .filter(|u| u.credit >= floor)
        .filter_map(|u| distance_within_range(trg, u).map(|d| (u, d)))
        .collect();
    pool.sort_by(|a, b| a.0.user_id.cmp(&b.0.user_id));

    let chosen: Vec<Assignee> = match strategy.kind {
        StrategyKind::Location | StrategyKind::CreditFiltered => {
            pool.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.user_id.cmp(&b.0.user_id)));
            take(&pool, k, |(u, d)| Assignee { user_id: u.user_id.clone(), score: -d })?
        }
        StrategyKind::Interest => {
            let mut scored: Vec<(&UserAgent, usize)> =
                pool.iter().map(|(u, _)| (*u, interest_overlap(u, &tags))).filter(|(_, n)| *n > 0).collect();
            scored.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.user_id.cmp(&b.0.user_id)));
            take(&scored, k, |(u, n)| Assignee { user_id: u.user_id.clone(), score: *n as f64 })?
        }
        StrategyKind::Random => {
            if pool.len() < k {
                return Err(AssignmentError::InsufficientParticipants { eligible: pool.len(), requested: k });
            }
            pool.choose_multiple(rng, k).map(|(u, _)| Assignee { user_id: u.user_id.clone(), score: 0.0 }).collect()
        }
        StrategyKind::GameTheory | StrategyKind::Genetic => {
            let mut scored: Vec<(&UserAgent, usize, f64)> =
                pool.iter().map(|(u, d)| (*u, interest_overlap(u, &tags), *d)).collect();
            scored.sort_by(|a, b| {
                b.1.cmp(&a.1).then_with(|| a.2.total_cmp(&b.2)).then_with(|| a.0.user_id.cmp(&b.0.user_id))
            });
            take(&scored, k, |(u, n, d)| Assignee { user_id: u.user_id.clone(), score: *n as f64 - d / 1.0e6 })?
        }
    };
    Ok(AssignmentResult { task_id: trg.root, selected_strategy_id: strategy.strategy_id, assignees: chosen })
}

fn take<T>(items: &[T], k: usize, f: impl Fn(&T) -> Assignee) -> Result<Vec<Assignee>, AssignmentError> {
    if items.len() < k {
        return Err(AssignmentError::InsufficientParticipants { eligible: items.len(), requested: k });
    }
    Ok(items[..k].iter().map(f).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum LibraryOp {
    Add(Strategy),
    Remove(StrategyId),
    Replace(Strategy),
}

/// Adds, removes or replaces a strategy, keeping the model's rows aligned.
/// New rows start at zero; a replaced strategy keeps its learned row.
pub fn manage_library(
    library: &mut StrategyLibrary,
    model: &mut SasModel,
    op: LibraryOp,
) -> Result<(), AssignmentError> {
    match op {
        LibraryOp::Add(s) => {
            if library.strategies.contains_key(&s.strategy_id) {
                return Err(AssignmentError::DuplicateId(s.strategy_id));
            }
            if s.applicability.len() != model.dims {
                return Err(AssignmentError::DimensionMismatch { expected: model.dims, got: s.applicability.len() });
            }
            model.rows.insert(s.strategy_id, vec![0.0; model.dims]);
            library.strategies.insert(s.strategy_id, s);
        }
        LibraryOp::Remove(id) => {
            library.strategies.remove(&id).ok_or(AssignmentError::UnknownStrategy(id))?;
            model.rows.remove(&id);
        }
        LibraryOp::Replace(s) => {
            let slot =
                library.strategies.get_mut(&s.strategy_id).ok_or(AssignmentError::UnknownStrategy(s.strategy_id))?;
            *slot = s;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{AgentStore, GeoPoint, ProcessAgent, TaskAgent, TaskInfo, Tpid};
    use crate::config::KernelConfig;
    use crate::scheduler::Policy;
    use crate::task::TaskPhase;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn strategy(id: StrategyId, kind: StrategyKind, dims: usize) -> Strategy {
        Strategy {
            strategy_id: id,
            name: format!("s{id}"),
            kind,
            params: StrategyParams::default(),
            applicability: vec![0.0; dims],
            simplified: kind.is_simplified(),
        }
    }

    fn trg_with(users: Vec<UserAgent>, center: Option<GeoPoint>, range: f64) -> TaskResourceGraph {
        let cfg = KernelConfig::default();
        let mut store = AgentStore::new(cfg.alarm_thresholds, cfg.availability);
        for u in users {
            store.upsert_user(u);
        }
        let info = TaskInfo {
            location: center.map(|p| crate::agents::LocationRef { point: Some(p), ..Default::default() }),
            topic: "photo-collection".into(),
            vector: vec![1.0, 0.0, 0.0],
            ..Default::default()
        };
        let agent = TaskAgent {
            task_id: Tid(1),
            tpid: Tpid(1),
            process_state: TaskPhase::Allocation,
            prio: 8,
            task_info: info,
            device_num: 0,
            device_ids: vec![],
            sensing_data: None,
            range,
            reward: 0.0,
            format: "any".into(),
            u_credit: 0.0,
            submit_state: Default::default(),
            correction_bit: vec![],
        };
        store.insert_task(agent, ProcessAgent::new(Tpid(1), Tid(1), Policy::Fcfs, 8, 0));
        store.build_trg(Tid(1)).unwrap()
    }

    #[test]
    fn nearest_three_within_range() {
        let users = [100.0, 200.0, 300.0, 9000.0, 12000.0]
            .iter()
            .enumerate()
            .map(|(i, d)| UserAgent::new(format!("u{i}"), GeoPoint::new(*d, 0.0), 50.0))
            .collect();
        let trg = trg_with(users, Some(GeoPoint::default()), 1000.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = assign(&trg, &strategy(1, StrategyKind::Location, 3), 3, &mut rng).unwrap();
        assert_eq!(r.user_ids(), vec![UserId::new("u0"), UserId::new("u1"), UserId::new("u2")]);
        let err = assign(&trg, &strategy(1, StrategyKind::Location, 3), 4, &mut rng).unwrap_err();
        assert_eq!(err, AssignmentError::InsufficientParticipants { eligible: 3, requested: 4 });
    }

    #[test]
    fn interest_tie_goes_to_lower_id() {
        let users = vec![
            UserAgent::new("u3", GeoPoint::default(), 50.0).with_interests(["photo-collection"]),
            UserAgent::new("u2", GeoPoint::default(), 50.0).with_interests(["photo-collection", "x"]),
            UserAgent::new("u1", GeoPoint::default(), 50.0).with_interests(["photo-collection"]),
        ];
        let trg = trg_with(users, None, 1000.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = assign(&trg, &strategy(2, StrategyKind::Interest, 3), 1, &mut rng).unwrap();
        assert_eq!(r.user_ids(), vec![UserId::new("u1")]);
    }

    #[test]
    fn random_is_seed_reproducible() {
        let users = (0..10).map(|i| UserAgent::new(format!("u{i}"), GeoPoint::default(), 50.0)).collect();
        let trg = trg_with(users, None, 1000.0);
        let s = strategy(4, StrategyKind::Random, 3);
        let a = assign(&trg, &s, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = assign(&trg, &s, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_and_ties() {
        let mut lib = StrategyLibrary::default();
        let mut model = SasModel { rows: BTreeMap::new(), dims: 3, temperature: 1.0, learning_rate: 0.1 };
        assert_eq!(select_for_vector(&[1.0, 0.0, 0.0], &model, &lib).unwrap_err(), AssignmentError::EmptyLibrary);
        for id in [3, 1, 2] {
            manage_library(&mut lib, &mut model, LibraryOp::Add(strategy(id, StrategyKind::Location, 3))).unwrap();
        }
        let sel = select_for_vector(&[1.0, 0.0, 0.0], &model, &lib).unwrap();
        assert_eq!(sel.strategy_id, 1);
        assert!((sel.probabilities.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-9);

        // location row weighted highest on has_location
        model.rows.insert(2, vec![2.0, 0.5, 0.0]);
        model.rows.insert(3, vec![1.0, 1.0, 0.0]);
        // dot products: s1 = 0, s2 = 2*1 + 0.5*1 = 2.5, s3 = 1 + 1 = 2
        let sel = select_for_vector(&[1.0, 1.0, 0.0], &model, &lib).unwrap();
        assert_eq!(sel.strategy_id, 2);
    }

    #[test]
    fn library_management() {
        let mut lib = StrategyLibrary::default();
        let mut model = SasModel { rows: BTreeMap::new(), dims: 2, temperature: 1.0, learning_rate: 0.1 };
        manage_library(&mut lib, &mut model, LibraryOp::Add(strategy(1, StrategyKind::Location, 2))).unwrap();
        assert_eq!(model.row(1), Some(&[0.0, 0.0][..]));
        assert_eq!(
            manage_library(&mut lib, &mut model, LibraryOp::Add(strategy(1, StrategyKind::Interest, 2))),
            Err(AssignmentError::DuplicateId(1))
        );
        manage_library(&mut lib, &mut model, LibraryOp::Replace(strategy(1, StrategyKind::Interest, 2))).unwrap();
        assert_eq!(lib.get(1).unwrap().kind, StrategyKind::Interest);
        manage_library(&mut lib, &mut model, LibraryOp::Remove(1)).unwrap();
        assert_eq!(select_for_vector(&[0.0, 0.0], &model, &lib).unwrap_err(), AssignmentError::EmptyLibrary);
        assert_eq!(
            manage_library(&mut lib, &mut model, LibraryOp::Remove(1)),
            Err(AssignmentError::UnknownStrategy(1))
        );
    }

    #[test]
    fn update_moves_only_chosen_row() {
        let mut lib = StrategyLibrary::default();
        let mut model = SasModel { rows: BTreeMap::new(), dims: 2, temperature: 1.0, learning_rate: 0.5 };
        for id in [1, 2] {
            manage_library(&mut lib, &mut model, LibraryOp::Add(strategy(id, StrategyKind::Location, 2))).unwrap();
        }
        let v = [1.0, 0.5];
        let before = model.clone();
        model.update(1, &v, 0.0).unwrap();
        assert_eq!(model, before);
        model.update(1, &v, 1.0).unwrap();
        let s1 = model.score(1, &v).unwrap();
        model.update(1, &v, 1.0).unwrap();
        assert!(model.score(1, &v).unwrap() > s1);
        let s2 = model.score(1, &v).unwrap();
        model.update(1, &v, -1.0).unwrap();
        assert!(model.score(1, &v).unwrap() < s2);
        assert_eq!(model.row(2), before.row(2));
        assert_eq!(model.update(9, &v, 1.0), Err(AssignmentError::UnknownStrategy(9)));
        assert!(matches!(model.update(1, &v, f64::NAN), Err(AssignmentError::InvalidOutcome(_))));
    }
}
