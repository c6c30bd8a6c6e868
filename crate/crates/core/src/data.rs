//! Task data storage and the knowledge base.
//!
//! Records are indexed in a cube keyed by (classification, day bucket, geo
//! cell) and persisted as an append-only JSON-lines log. Media payloads are
//! stored by content hash. Completed tasks are cleaned up periodically;
//! records marked analyzed move into the knowledge base as frames first.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::GeoPoint;
use crate::config::DataConfig;
use crate::task::{TaskPhase, TaskSpec, Tid};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown task {0:?}")]
    UnknownTask(Tid),
    #[error("malformed range on {axis}")]
    MalformedRange { axis: &'static str },
    #[error("{uploader} may not upload {kind:?} data for {tid:?}")]
    InvalidUploader { tid: Tid, uploader: String, kind: DataKind },
    #[error("unknown knowledge item {0}")]
    UnknownItem(u64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataKind {
    /// Raw data supplied by the publisher.
    #[serde(rename = "RD")]
    Rd,
    /// Data uploaded by participants.
    #[serde(rename = "NUD")]
    Nud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Text,
    ImageRef,
    AudioRef,
    SensorSeries,
    Document,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Payload {
    Inline { value: Value },
    Media { sha256: String, path: String },
}

impl Payload {
    /// Writes `bytes` under `dir` named by their hash and returns the
    /// reference.
    pub fn store_media(bytes: &[u8], dir: &Path) -> Result<Payload, DataError> {
        let hash = hex::encode(Sha256::digest(bytes));
        fs::create_dir_all(dir)?;
        let path = dir.join(&hash);
        if !path.exists() {
            fs::write(&path, bytes)?;
        }
        Ok(Payload::Media { sha256: hash, path: path.display().to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    /// Assigned by the store; any value passed in is replaced.
    #[serde(default)]
    pub record_id: u64,
    pub task_id: Tid,
    pub kind: DataKind,
    pub modality: Modality,
    pub payload: Payload,
    pub uploader: String,
    pub timestamp: u64,
    #[serde(default)]
    pub geo: Option<GeoPoint>,
    #[serde(default)]
    pub analyzed: bool,
}

/// Coordinates of one cube cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CubeCell {
    pub classification: String,
    pub day: u64,
    /// Grid cell of the record location, if it has one.
    pub geo: Option<(i64, i64)>,
}

/// Per-axis filters; `None` leaves an axis open. Ranges are half-open and
/// given in cell coordinates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CubeQuery {
    pub classifications: Option<BTreeSet<String>>,
    pub days: Option<Range<u64>>,
    pub geo_x: Option<Range<i64>>,
    pub geo_y: Option<Range<i64>>,
}

impl CubeQuery {
    pub fn all() -> Self {
        CubeQuery::default()
    }

    pub fn classification(mut self, c: impl Into<String>) -> Self {
        self.classifications.get_or_insert_with(BTreeSet::new).insert(c.into());
        self
    }

    pub fn days(mut self, r: Range<u64>) -> Self {
        self.days = Some(r);
        self
    }

    pub fn geo(mut self, x: Range<i64>, y: Range<i64>) -> Self {
        self.geo_x = Some(x);
        self.geo_y = Some(y);
        self
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.days.as_ref().is_some_and(|r| r.start > r.end) {
            return Err(DataError::MalformedRange { axis: "days" });
        }
        if self.geo_x.as_ref().is_some_and(|r| r.start > r.end) || self.geo_y.as_ref().is_some_and(|r| r.start > r.end)
        {
            return Err(DataError::MalformedRange { axis: "geo" });
        }
        Ok(())
    }

    pub fn contains(&self, cell: &CubeCell) -> bool {
        if self.classifications.as_ref().is_some_and(|cs| !cs.contains(&cell.classification)) {
            return false;
        }
        if self.days.as_ref().is_some_and(|r| !r.contains(&cell.day)) {
            return false;
        }
        if self.geo_x.is_some() || self.geo_y.is_some() {
            let Some((gx, gy)) = cell.geo else { return false };
            if self.geo_x.as_ref().is_some_and(|r| !r.contains(&gx))
                || self.geo_y.as_ref().is_some_and(|r| !r.contains(&gy))
            {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum LogEntry {
    Put { classification: String, record: DataRecord },
    Del { record_id: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanupReport {
    pub removed: Vec<u64>,
    pub transferred: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanupPolicy {
    /// Records younger than this many ticks are kept.
    pub min_age: u64,
}

/// Cube-indexed record store.
#[derive(Debug)]
pub struct DataStore {
    time_bucket: u64,
    geo_cell_m: f64,
    records: BTreeMap<u64, (CubeCell, DataRecord)>,
    cells: BTreeMap<CubeCell, BTreeSet<u64>>,
    next_id: u64,
    log: Option<File>,
}

impl DataStore {
    pub fn new(cfg: &DataConfig) -> Self {
        DataStore {
            time_bucket: cfg.time_bucket.max(1),
            geo_cell_m: cfg.geo_cell_m,
            records: BTreeMap::new(),
            cells: BTreeMap::new(),
            next_id: 1,
            log: None,
        }
    }

    /// Opens a store backed by a JSON-lines log, replaying existing entries.
    pub fn open(cfg: &DataConfig, path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let mut store = DataStore::new(cfg);
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str(&line)? {
                    LogEntry::Put { classification, record } => store.index(classification, record),
                    LogEntry::Del { record_id } => {
                        store.unindex(record_id);
                    }
                }
            }
        }
        store.log = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(store)
    }

    pub fn cell_of(&self, classification: &str, timestamp: u64, geo: Option<GeoPoint>) -> CubeCell {
        CubeCell {
            classification: classification.to_string(),
            day: timestamp / self.time_bucket,
            geo: geo.map(|p| ((p.x / self.geo_cell_m).floor() as i64, (p.y / self.geo_cell_m).floor() as i64)),
        }
    }

    fn index(&mut self, classification: String, record: DataRecord) {
        let cell = self.cell_of(&classification, record.timestamp, record.geo);
        self.next_id = self.next_id.max(record.record_id + 1);
        self.cells.entry(cell.clone()).or_default().insert(record.record_id);
        self.records.insert(record.record_id, (cell, record));
    }

    fn unindex(&mut self, id: u64) -> Option<DataRecord> {
        let (cell, record) = self.records.remove(&id)?;
        if let Some(ids) = self.cells.get_mut(&cell) {
            ids.remove(&id);
            if ids.is_empty() {
                self.cells.remove(&cell);
            }
        }
        Some(record)
    }

    fn append(&mut self, entry: &LogEntry) -> Result<(), DataError> {
        if let Some(f) = self.log.as_mut() {
            let mut line = serde_json::to_vec(entry)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        Ok(())
    }

    /// Stores a record for `task`. Raw data must come from the publisher,
    /// uploads from one of the task's participants.
    pub fn store(&mut self, mut record: DataRecord, task: &TaskSpec) -> Result<u64, DataError> {
        if record.task_id != task.tid {
            return Err(DataError::UnknownTask(record.task_id));
        }
        let ok = match record.kind {
            DataKind::Rd => record.uploader == task.publisher.0,
            DataKind::Nud => {
                task.participants.users.iter().any(|u| u.0 == record.uploader)
                    || task.participants.devices.iter().any(|d| d.0 == record.uploader)
            }
        };
        if !ok {
            return Err(DataError::InvalidUploader {
                tid: task.tid,
                uploader: record.uploader.clone(),
                kind: record.kind,
            });
        }
        record.record_id = self.next_id;
        let entry = LogEntry::Put { classification: task.classification.clone(), record: record.clone() };
        self.append(&entry)?;
        let id = record.record_id;
        self.index(task.classification.clone(), record);
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Option<&DataRecord> {
        self.records.get(&id).map(|(_, r)| r)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Every record, in id order.
    pub fn records(&self) -> impl Iterator<Item = (&CubeCell, &DataRecord)> {
        self.records.values().map(|(c, r)| (c, r))
    }

    pub fn records_for(&self, tid: Tid) -> impl Iterator<Item = &DataRecord> {
        self.records.values().map(|(_, r)| r).filter(move |r| r.task_id == tid)
    }

    /// Records whose cell lies inside every axis range, in id order.
    pub fn query(&self, q: &CubeQuery) -> Result<Vec<&DataRecord>, DataError> {
        q.validate()?;
        let mut ids: BTreeSet<u64> = BTreeSet::new();
        for (cell, cell_ids) in &self.cells {
            if q.contains(cell) {
                ids.extend(cell_ids.iter().copied());
            }
        }
        Ok(ids.into_iter().filter_map(|id| self.get(id)).collect())
    }

    pub fn mark_analyzed(&mut self, id: u64) -> bool {
        match self.records.get_mut(&id) {
            Some((_, r)) => {
                r.analyzed = true;
                true
            }
            None => false,
        }
    }

    /// Removes records of terminated tasks older than the policy age.
    /// Analyzed records are turned into knowledge frames first.
    pub fn cleanup_completed<F>(
        &mut self,
        policy: CleanupPolicy,
        now: u64,
        phase_of: F,
        kb: &mut KnowledgeBase,
    ) -> Result<CleanupReport, DataError>
    where
        F: Fn(Tid) -> Option<TaskPhase>,
    {
        let doomed: Vec<u64> = self
            .records
            .values()
            .filter(|(_, r)| {
                phase_of(r.task_id) == Some(TaskPhase::Termination) && now.saturating_sub(r.timestamp) > policy.min_age
            })
            .map(|(_, r)| r.record_id)
            .collect();
        let mut report = CleanupReport::default();
        for id in doomed {
            let (cell, record) = self.records.get(&id).cloned().expect("listed above");
            if record.analyzed {
                let kid = kb.insert(KnowledgeItem::frame_from_record(&record, &cell))?;
                report.transferred.push(kid);
            }
            self.append(&LogEntry::Del { record_id: id })?;
            self.unindex(id);
            report.removed.push(id);
        }
        Ok(report)
    }
}

// ---------------------------------------------------------------------------
// Knowledge base

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    /// Existing knowledge.
    #[serde(rename = "EK")]
    Ek,
    /// Newly mined knowledge.
    #[serde(rename = "NK")]
    Nk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Representation {
    ProductionRule { if_features: BTreeSet<String>, then_action: String },
    Frame { slots: BTreeMap<String, Value> },
    ObjectRef { class: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    /// Assigned on insert.
    #[serde(default)]
    pub kid: u64,
    pub category: Category,
    pub representation: Representation,
    #[serde(default)]
    pub address: String,
    #[serde(default)]
    pub links: BTreeSet<u64>,
    /// Logical time of the last link change, for eviction.
    #[serde(default)]
    pub last_linked: u64,
}

impl KnowledgeItem {
    pub fn new(category: Category, representation: Representation) -> Self {
        KnowledgeItem {
            kid: 0,
            category,
            representation,
            address: String::new(),
            links: BTreeSet::new(),
            last_linked: 0,
        }
    }

    pub fn rule<I, S>(category: Category, if_features: I, then_action: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        KnowledgeItem::new(
            category,
            Representation::ProductionRule {
                if_features: if_features.into_iter().map(Into::into).collect(),
                then_action: then_action.into(),
            },
        )
    }

    fn frame_from_record(r: &DataRecord, cell: &CubeCell) -> Self {
        let mut slots = BTreeMap::new();
        slots.insert("task".to_string(), Value::from(r.task_id.0));
        slots.insert("classification".to_string(), Value::from(cell.classification.clone()));
        slots.insert("modality".to_string(), serde_json::to_value(r.modality).expect("modality serializes"));
        slots.insert("uploader".to_string(), Value::from(r.uploader.clone()));
        slots.insert("day".to_string(), Value::from(cell.day));
        slots.insert("payload".to_string(), serde_json::to_value(&r.payload).expect("payload serializes"));
        let mut item = KnowledgeItem::new(Category::Nk, Representation::Frame { slots });
        item.address = format!("record:{}", r.record_id);
        item
    }

    /// Features this item can match against a descriptor.
    pub fn features(&self) -> BTreeSet<String> {
        match &self.representation {
            Representation::ProductionRule { if_features, .. } => if_features.clone(),
            Representation::Frame { slots } => slots
                .iter()
                .map(|(k, v)| match v {
                    Value::String(s) => format!("{k}={s}"),
                    other => format!("{k}={other}"),
                })
                .collect(),
            Representation::ObjectRef { class } => BTreeSet::from([format!("class={class}")]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    items: BTreeMap<u64, KnowledgeItem>,
    next_kid: u64,
    clock: u64,
    max_items: usize,
}

impl KnowledgeBase {
    pub fn new(max_items: usize) -> Self {
        KnowledgeBase { items: BTreeMap::new(), next_kid: 1, clock: 0, max_items: max_items.max(1) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, kid: u64) -> Option<&KnowledgeItem> {
        self.items.get(&kid)
    }

    pub fn items(&self) -> impl Iterator<Item = &KnowledgeItem> {
        self.items.values()
    }

    /// Adds an item, linking it both ways to every kid in its `links`.
    /// Evicts the least recently linked item when over capacity.
    pub fn insert(&mut self, mut item: KnowledgeItem) -> Result<u64, DataError> {
        if let Some(missing) = item.links.iter().find(|k| !self.items.contains_key(k)) {
            return Err(DataError::UnknownItem(*missing));
        }
        let kid = self.next_kid;
        self.next_kid += 1;
        self.clock += 1;
        item.kid = kid;
        item.last_linked = self.clock;
        for other in &item.links {
            let o = self.items.get_mut(other).expect("checked");
            o.links.insert(kid);
            o.last_linked = self.clock;
        }
        self.items.insert(kid, item);
        while self.items.len() > self.max_items {
            let victim = self
                .items
                .values()
                .filter(|i| i.kid != kid)
                .min_by_key(|i| (i.last_linked, i.kid))
                .map(|i| i.kid)
                .expect("more than one item");
            self.remove(victim);
        }
        Ok(kid)
    }

    pub fn link(&mut self, a: u64, b: u64) -> Result<(), DataError> {
        for k in [a, b] {
            if !self.items.contains_key(&k) {
                return Err(DataError::UnknownItem(k));
            }
        }
        if a == b {
            return Ok(());
        }
        self.clock += 1;
        let clock = self.clock;
        for (x, y) in [(a, b), (b, a)] {
            let item = self.items.get_mut(&x).expect("checked");
            item.links.insert(y);
            item.last_linked = clock;
        }
        Ok(())
    }

    pub fn remove(&mut self, kid: u64) -> Option<KnowledgeItem> {
        let item = self.items.remove(&kid)?;
        for other in &item.links {
            if let Some(o) = self.items.get_mut(other) {
                o.links.remove(&kid);
            }
        }
        Some(item)
    }

    /// Links are symmetric and point at existing items.
    pub fn links_consistent(&self) -> bool {
        self.items
            .values()
            .all(|i| i.links.iter().all(|l| l != &i.kid && self.items.get(l).is_some_and(|o| o.links.contains(&i.kid))))
    }

    /// Items matching at least one descriptor feature. Rules whose whole
    /// condition is covered come first, then by match count, link degree
    /// and kid.
    pub fn search(&self, descriptor: &BTreeSet<String>) -> Vec<&KnowledgeItem> {
        let mut hits: Vec<(bool, usize, usize, &KnowledgeItem)> = self
            .items
            .values()
            .filter_map(|item| {
                let features = item.features();
                let matched = features.intersection(descriptor).count();
                if matched == 0 {
                    return None;
                }
                let full_rule = matches!(&item.representation,
                    Representation::ProductionRule { if_features, .. } if if_features.is_subset(descriptor));
                Some((full_rule, matched, item.links.len(), item))
            })
            .collect();
        hits.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2)).then(a.3.kid.cmp(&b.3.kid)));
        hits.into_iter().map(|h| h.3).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Convenience for descriptor literals.
pub fn descriptor<I, S>(features: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    features.into_iter().map(Into::into).collect()
}

/// Path of the record log inside a data directory.
pub fn log_path(dir: &Path) -> PathBuf {
    dir.join("records.jsonl")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KernelConfig;
    use crate::task::{Participants, TaskDescription, TerminationCondition, UserId};

    fn spec(tid: u64, class: &str) -> TaskSpec {
        TaskSpec {
            tid: Tid(tid),
            publisher: UserId::new("pub"),
            participants: Participants {
                users: [UserId::new("u1"), UserId::new("u2")].into(),
                devices: Default::default(),
            },
            classification: class.into(),
            description: TaskDescription { lang: "en".into(), text: "t".into() },
            termination: TerminationCondition { deadline: None, scale: Some(2), extra: None },
            created_at: 0,
        }
    }

    fn rec(tid: u64, kind: DataKind, uploader: &str, ts: u64, geo: Option<GeoPoint>) -> DataRecord {
        DataRecord {
            record_id: 0,
            task_id: Tid(tid),
            kind,
            modality: Modality::Text,
            payload: Payload::Inline { value: Value::from("x") },
            uploader: uploader.into(),
            timestamp: ts,
            geo,
            analyzed: false,
        }
    }

    fn store() -> DataStore {
        DataStore::new(&KernelConfig::default().data)
    }

    #[test]
    fn store_and_query() {
        let mut s = store();
        let t = spec(1, "sensing-collection");
        let id = s.store(rec(1, DataKind::Nud, "u2", 10, Some(GeoPoint::new(1500.0, 200.0))), &t).unwrap();
        let all = s.query(&CubeQuery::all().classification("sensing-collection")).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].record_id, id);
        assert!(s.query(&CubeQuery::all().days(3..3)).unwrap().is_empty());
        assert_eq!(s.query(&CubeQuery::all().geo(1..2, 0..1)).unwrap().len(), 1);
        assert!(matches!(
            s.query(&CubeQuery::all().days(std::ops::Range { start: 4, end: 3 })),
            Err(DataError::MalformedRange { .. })
        ));
    }

    #[test]
    fn uploader_rules() {
        let mut s = store();
        let t = spec(1, "sensing-collection");
        assert!(s.store(rec(1, DataKind::Rd, "pub", 0, None), &t).is_ok());
        assert!(matches!(s.store(rec(1, DataKind::Rd, "u1", 0, None), &t), Err(DataError::InvalidUploader { .. })));
        assert!(matches!(s.store(rec(1, DataKind::Nud, "u9", 0, None), &t), Err(DataError::InvalidUploader { .. })));
        assert!(matches!(s.store(rec(2, DataKind::Nud, "u1", 0, None), &t), Err(DataError::UnknownTask(_))));
    }

    #[test]
    fn cleanup_moves_analyzed_into_kb() {
        let mut s = store();
        let mut kb = KnowledgeBase::new(100);
        let (done, live) = (spec(1, "sensing-collection"), spec(2, "sensing-collection"));
        let a = s.store(rec(1, DataKind::Nud, "u1", 0, None), &done).unwrap();
        let b = s.store(rec(1, DataKind::Nud, "u2", 0, None), &done).unwrap();
        let c = s.store(rec(2, DataKind::Nud, "u1", 0, None), &live).unwrap();
        s.mark_analyzed(a);
        let phase = |t: Tid| Some(if t == Tid(1) { TaskPhase::Termination } else { TaskPhase::Execution });
        let report = s.cleanup_completed(CleanupPolicy { min_age: 100 }, 1000, phase, &mut kb).unwrap();
        assert_eq!(report.removed, vec![a, b]);
        assert_eq!(report.transferred.len(), 1);
        assert_eq!(kb.len(), 1);
        assert!(s.get(c).is_some());
        let item = kb.get(report.transferred[0]).unwrap();
        assert_eq!(item.category, Category::Nk);
        assert!(item.features().contains("uploader=u1"));

        let empty = store().cleanup_completed(CleanupPolicy { min_age: 1 }, 10, phase, &mut kb).unwrap();
        assert_eq!(empty, CleanupReport::default());
    }

    #[test]
    fn log_replay() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = KernelConfig::default().data;
        let path = log_path(dir.path());
        let t = spec(1, "sensing-collection");
        let mut kb = KnowledgeBase::new(10);
        {
            let mut s = DataStore::open(&cfg, &path).unwrap();
            s.store(rec(1, DataKind::Nud, "u1", 0, None), &t).unwrap();
            s.store(rec(1, DataKind::Nud, "u2", 500_000, None), &t).unwrap();
            s.cleanup_completed(CleanupPolicy { min_age: 1000 }, 10_000, |_| Some(TaskPhase::Termination), &mut kb)
                .unwrap();
        }
        let s = DataStore::open(&cfg, &path).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(2).unwrap().uploader, "u2");
        let mut s = s;
        assert_eq!(s.store(rec(1, DataKind::Nud, "u1", 0, None), &t).unwrap(), 3);
    }

    #[test]
    fn media_by_reference() {
        let dir = tempfile::tempdir().unwrap();
        let p = Payload::store_media(b"abc", dir.path()).unwrap();
        let Payload::Media { sha256, path } = p else { panic!("expected media") };
        assert_eq!(sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(fs::read(path).unwrap(), b"abc");
    }

    #[test]
    fn kb_search_ranking() {
        let mut kb = KnowledgeBase::new(100);
        let partial =
            kb.insert(KnowledgeItem::rule(Category::Ek, ["small_range", "low_reward", "rural"], "expand")).unwrap();
        let full = kb.insert(KnowledgeItem::rule(Category::Ek, ["small_range"], "expand-range")).unwrap();
        let lone =
            kb.insert(KnowledgeItem::new(Category::Ek, Representation::ObjectRef { class: "photo".into() })).unwrap();
        let linked =
            kb.insert(KnowledgeItem::new(Category::Ek, Representation::ObjectRef { class: "photo".into() })).unwrap();
        kb.link(linked, partial).unwrap();

        let d = descriptor(["small_range", "low_reward"]);
        let ids: Vec<u64> = kb.search(&d).iter().map(|i| i.kid).collect();
        assert_eq!(ids, vec![full, partial]);

        let ids: Vec<u64> = kb.search(&descriptor(["class=photo"])).iter().map(|i| i.kid).collect();
        assert_eq!(ids, vec![linked, lone]);
        assert!(kb.search(&descriptor(["nothing"])).is_empty());
        assert!(kb.links_consistent());
    }

    #[test]
    fn kb_cap_evicts_least_recently_linked() {
        let mut kb = KnowledgeBase::new(2);
        let a = kb.insert(KnowledgeItem::rule(Category::Ek, ["a"], "x")).unwrap();
        let b = kb.insert(KnowledgeItem::rule(Category::Ek, ["b"], "x")).unwrap();
        kb.link(a, b).unwrap();
        let mut c = KnowledgeItem::rule(Category::Nk, ["c"], "x");
        c.links.insert(a);
        let c = kb.insert(c).unwrap();
        assert_eq!(kb.len(), 2);
        assert!(kb.get(b).is_none());
        assert!(kb.get(a).is_some() && kb.get(c).is_some());
        assert!(kb.links_consistent());
    }
}
