//! Task resolution: raw text and discrete selections become key information,
//! a fixed-width task vector, and finally a populated task agent.
//!
//! Extraction is lexicon driven. A keyword votes for a topic and may also
//! mark a slot; numbers directly in front of slot keywords or built-in unit
//! words fill the numeric slots.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{LocationRef, TaskAgent, TaskInfo, Tpid};
use crate::config::ResolutionConfig;
use crate::task::{DiscreteFeatures, TaskPhase, TaskTable, Tid};

#[derive(Debug, Error)]
pub enum ResolutionError {
    #[error("task description is empty")]
    EmptyDescription,
    #[error("no lexicon keyword found in description")]
    NoTopicFound,
    #[error("unknown task {0}")]
    UnknownTask(Tid),
    #[error("task {0} is in phase {1}, expected Creation or Generation")]
    WrongPhase(Tid, TaskPhase),
    #[error("keyword `{keyword}` maps to both `{first}` and `{second}`")]
    ConflictingKeyword { keyword: String, first: String, second: String },
    #[error("invalid discrete feature {0}")]
    InvalidFeature(&'static str),
    #[error("lexicon io: {0}")]
    Io(#[from] std::io::Error),
    #[error("lexicon parse: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    /// A number in front of the keyword is a participant count.
    Count,
    /// The keyword names a place.
    Location,
    /// The keyword names an execution mode.
    Manner,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LexEntry {
    pub keyword: String,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub slot: Option<Slot>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lexicon {
    entries: Vec<LexEntry>,
    version: String,
}

impl Lexicon {
    pub fn new(entries: Vec<LexEntry>) -> Result<Self, ResolutionError> {
        let mut entries: Vec<LexEntry> = entries
            .into_iter()
            .map(|e| LexEntry { keyword: e.keyword.trim().to_lowercase(), ..e })
            .filter(|e| !e.keyword.is_empty())
            .collect();
        entries.sort();
        entries.dedup();
        let mut topics: BTreeMap<&str, &str> = BTreeMap::new();
        for e in &entries {
            if let Some(t) = &e.topic {
                if let Some(prev) = topics.insert(&e.keyword, t) {
                    if prev != t {
                        return Err(ResolutionError::ConflictingKeyword {
                            keyword: e.keyword.clone(),
                            first: prev.to_string(),
                            second: t.clone(),
                        });
                    }
                }
            }
        }
        let canonical = serde_json::to_vec(&entries).expect("lexicon entries serialize");
        let version = hex::encode(&Sha256::digest(&canonical)[..8]);
        Ok(Lexicon { entries, version })
    }

    pub fn from_json(text: &str) -> Result<Self, ResolutionError> {
        Lexicon::new(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ResolutionError> {
        Lexicon::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> &[LexEntry] {
        &self.entries
    }

    /// Content hash of the normalized entry list.
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn topics(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entries.iter().filter_map(|e| e.topic.as_ref()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn keywords(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.entries.iter().map(|e| &e.keyword).collect();
        set.into_iter().cloned().collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyInfo {
    pub topic: String,
    pub manner: Option<String>,
    pub location: Option<LocationRef>,
    pub duration_days: Option<f64>,
    pub participant_count: Option<u32>,
    pub keywords: BTreeSet<String>,
}

impl KeyInfo {
    /// Key information taken from discrete selections only, used when text
    /// extraction finds no topic.
    pub fn from_discrete(discrete: &DiscreteFeatures, classification: &str) -> Self {
        let mut info = KeyInfo {
            topic: discrete.topic.clone().unwrap_or_else(|| classification.to_string()),
            ..Default::default()
        };
        info.merge_discrete(discrete);
        info
    }

    /// Overlays structured selections; they take precedence over text.
    pub fn merge_discrete(&mut self, d: &DiscreteFeatures) {
        if let Some(t) = &d.topic {
            self.topic = t.clone();
        }
        if d.location.is_some() || d.radius_m.is_some() {
            let loc = self.location.get_or_insert_with(LocationRef::default);
            if d.location.is_some() {
                loc.point = d.location;
            }
            if d.radius_m.is_some() {
                loc.radius_m = d.radius_m;
            }
        }
        if d.participant_count.is_some() {
            self.participant_count = d.participant_count;
        }
        if d.duration_days.is_some() {
            self.duration_days = d.duration_days;
        }
    }

    /// Description clarity in `(0, 10]`: slot coverage ratio times ten,
    /// floored at `min_clarity`.
    pub fn clarity(&self, min_clarity: f64) -> f64 {
        let filled = [
            !self.topic.is_empty(),
            self.manner.is_some(),
            self.location.is_some(),
            self.duration_days.is_some(),
            self.participant_count.is_some(),
        ]
        .iter()
        .filter(|b| **b)
        .count();
        (filled as f64 * 2.0).max(min_clarity).min(10.0)
    }
}

const PARTICIPANT_WORDS: &[&str] =
    &["participants", "participant", "people", "persons", "users", "workers", "volunteers"];

fn duration_unit(word: &str) -> Option<f64> {
    match word {
        "day" | "days" | "d" => Some(1.0),
        "hour" | "hours" | "h" | "hrs" => Some(1.0 / 24.0),
        "week" | "weeks" => Some(7.0),
        "month" | "months" => Some(30.0),
        _ => None,
    }
}

fn distance_unit(word: &str) -> Option<f64> {
    match word {
        "m" | "meter" | "meters" | "metre" | "metres" => Some(1.0),
        "km" | "kilometer" | "kilometers" | "kilometre" | "kilometres" => Some(1000.0),
        _ => None,
    }
}

fn token_matches(token: &str, keyword: &str) -> bool {
    token == keyword
        || token.strip_suffix('s').is_some_and(|t| t == keyword)
        || token.strip_suffix("es").is_some_and(|t| t == keyword)
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '.'))
        .map(|t| t.trim_matches('.').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Pulls topic, slots and keywords out of a task description.
pub fn extract_key_info(
    description: &str,
    lang: &str,
    lexicon: &Lexicon,
    cfg: &ResolutionConfig,
) -> Result<KeyInfo, ResolutionError> {
    if description.trim().is_empty() {
        return Err(ResolutionError::EmptyDescription);
    }
    let mut hits: Vec<&LexEntry> = Vec::new();
    let mut info = KeyInfo::default();

    if cfg.unsegmented_langs.iter().any(|l| l == lang) {
        let lowered = description.to_lowercase();
        hits.extend(lexicon.entries.iter().filter(|e| lowered.contains(&e.keyword)));
    } else {
        let tokens = tokenize(description);
        let joined = format!(" {} ", tokens.join(" "));
        for entry in &lexicon.entries {
            let found = if entry.keyword.contains(' ') {
                joined.contains(&format!(" {} ", entry.keyword))
            } else {
                tokens.iter().any(|t| token_matches(t, &entry.keyword))
            };
            if found {
                hits.push(entry);
            }
        }
        for pair in tokens.windows(2) {
            let Ok(n) = pair[0].parse::<f64>() else { continue };
            if !n.is_finite() || n < 0.0 {
                continue;
            }
            let word = pair[1].as_str();
            if let Some(days) = duration_unit(word) {
                info.duration_days.get_or_insert(n * days);
            } else if let Some(meters) = distance_unit(word) {
                info.location.get_or_insert_with(LocationRef::default).radius_m.get_or_insert(n * meters);
            } else if PARTICIPANT_WORDS.contains(&word)
                || lexicon.entries.iter().any(|e| e.slot == Some(Slot::Count) && token_matches(word, &e.keyword))
            {
                info.participant_count.get_or_insert(n as u32);
            }
        }
    }

    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &hits {
        info.keywords.insert(e.keyword.clone());
        if let Some(t) = &e.topic {
            *votes.entry(t).or_default() += 1;
        }
        match e.slot {
            Some(Slot::Location) => {
                let loc = info.location.get_or_insert_with(LocationRef::default);
                loc.name.get_or_insert_with(|| e.keyword.clone());
            }
            Some(Slot::Manner) => {
                info.manner.get_or_insert_with(|| e.keyword.clone());
            }
            _ => {}
        }
    }
    // BTreeMap iteration is alphabetical, so `max_by_key` keeping the first
    // maximum would favour the last; pick explicitly.
    let mut best: Option<(&str, usize)> = None;
    for (topic, n) in votes {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((topic, n));
        }
    }
    match best {
        Some((topic, _)) => info.topic = topic.to_string(),
        None => return Err(ResolutionError::NoTopicFound),
    }
    Ok(info)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationCaps {
    pub count: f64,
    pub radius_m: f64,
    pub duration_days: f64,
    pub reward: f64,
}

pub const SCALAR_FEATURES: [&str; 5] = ["has_location", "radius", "duration", "participant_count", "reward"];

/// Feature layout of task vectors for one lexicon/classification set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VectorSchema {
    pub classifications: Vec<String>,
    pub topics: Vec<String>,
    pub keywords: Vec<String>,
    pub caps: NormalizationCaps,
    pub lexicon_version: String,
}

impl VectorSchema {
    pub fn new(classifications: &[String], lexicon: &Lexicon, caps: NormalizationCaps) -> Self {
        VectorSchema {
            classifications: classifications.to_vec(),
            topics: lexicon.topics(),
            keywords: lexicon.keywords(),
            caps,
            lexicon_version: lexicon.version().to_string(),
        }
    }

    pub fn dims(&self) -> usize {
        self.classifications.len() + self.topics.len() + SCALAR_FEATURES.len() + self.keywords.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dims());
        names.extend(self.classifications.iter().map(|c| format!("class:{c}")));
        names.extend(self.topics.iter().map(|t| format!("topic:{t}")));
        names.extend(SCALAR_FEATURES.iter().map(|s| s.to_string()));
        names.extend(self.keywords.iter().map(|k| format!("kw:{k}")));
        names
    }

    pub fn index_of(&self, feature: &str) -> Option<usize> {
        self.feature_names().iter().position(|f| f == feature)
    }

    /// Short hash over the feature layout, caps and lexicon version.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for name in self.feature_names() {
            h.update(name.as_bytes());
            h.update([0]);
        }
        h.update(serde_json::to_vec(&self.caps).expect("caps serialize"));
        h.update(self.lexicon_version.as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskVector(pub Vec<f64>);

impl TaskVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &TaskVector) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|b| b * b).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

fn unit(value: f64, cap: f64) -> f64 {
    if value.is_finite() && cap > 0.0 {
        (value / cap).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Deterministic featurizer. `info` is expected to already carry the
/// discrete overrides (see [`KeyInfo::merge_discrete`]); only the reward is
/// read from `discrete`.
pub fn encode(info: &KeyInfo, discrete: &DiscreteFeatures, classification: &str, schema: &VectorSchema) -> TaskVector {
    let mut v = Vec::with_capacity(schema.dims());
    v.extend(schema.classifications.iter().map(|c| if c == classification { 1.0 } else { 0.0 }));
    v.extend(schema.topics.iter().map(|t| if *t == info.topic { 1.0 } else { 0.0 }));

    let point = info.location.as_ref().and_then(|l| l.point);
    let has_location = point.is_some();
    let radius = if has_location {
        info.location.as_ref().and_then(|l| l.radius_m).map_or(0.0, |r| unit(r, schema.caps.radius_m))
    } else {
        0.0
    };
    v.push(if has_location { 1.0 } else { 0.0 });
    v.push(radius);
    v.push(info.duration_days.map_or(0.0, |d| unit(d, schema.caps.duration_days)));
    v.push(info.participant_count.map_or(0.0, |c| unit(c as f64, schema.caps.count)));
    v.push(discrete.reward.map_or(0.0, |r| unit(r, schema.caps.reward)));

    v.extend(schema.keywords.iter().map(|k| if info.keywords.contains(k) { 1.0 } else { 0.0 }));
    TaskVector(v)
}

/// Builds the task agent for `tid` from its vector and key information.
/// Does not advance the task phase.
pub fn decode_to_agent(
    tasks: &TaskTable,
    tid: Tid,
    tpid: Tpid,
    vector: &TaskVector,
    info: &KeyInfo,
    discrete: &DiscreteFeatures,
    cfg: &ResolutionConfig,
) -> Result<TaskAgent, ResolutionError> {
    let spec = tasks.spec(tid).ok_or(ResolutionError::UnknownTask(tid))?;
    let phase = tasks.phase(tid).ok_or(ResolutionError::UnknownTask(tid))?;
    if !matches!(phase, TaskPhase::Creation | TaskPhase::Generation) {
        return Err(ResolutionError::WrongPhase(tid, phase));
    }
    let reward = discrete.reward.unwrap_or(0.0);
    if !(reward.is_finite() && reward >= 0.0) {
        return Err(ResolutionError::InvalidFeature("reward"));
    }
    let range = info.location.as_ref().and_then(|l| l.radius_m).unwrap_or(cfg.default_range_m);
    if !(range.is_finite() && range > 0.0) {
        return Err(ResolutionError::InvalidFeature("radius_m"));
    }
    let u_credit = discrete.u_credit.unwrap_or(0.0);
    if !(0.0..=crate::agents::MAX_CREDIT).contains(&u_credit) {
        return Err(ResolutionError::InvalidFeature("u_credit"));
    }
    let time_range =
        info.duration_days.map(|d| (spec.created_at, spec.created_at + (d * cfg.ticks_per_day as f64).round() as u64));

    Ok(TaskAgent {
        task_id: tid,
        tpid,
        process_state: phase,
        prio: discrete.prio.unwrap_or(cfg.default_prio).min(crate::scheduler::MAX_PRIO),
        task_info: TaskInfo {
            time_range,
            location: info.location.clone(),
            vector: vector.0.clone(),
            classification: spec.classification.clone(),
            topic: info.topic.clone(),
            manner: info.manner.clone(),
            participant_count: info.participant_count,
            duration_days: info.duration_days,
            keywords: info.keywords.clone(),
        },
        device_num: 0,
        device_ids: Vec::new(),
        sensing_data: None,
        range,
        reward,
        format: discrete.format.clone().unwrap_or_else(|| cfg.default_format.clone()),
        u_credit,
        submit_state: BTreeMap::new(),
        correction_bit: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KernelConfig;

    fn lexicon() -> Lexicon {
        Lexicon::from_json(
            r#"[
                {"keyword": "photo", "topic": "photo-collection", "slot": "count"},
                {"keyword": "lake", "topic": "photo-collection", "slot": "location"},
                {"keyword": "record", "topic": "audio-collection", "slot": "manner"},
                {"keyword": "noise", "topic": "audio-collection"}
            ]"#,
        )
        .unwrap()
    }

    fn cfg() -> ResolutionConfig {
        KernelConfig::default().resolution
    }

    #[test]
    fn lake_photos() {
        let info = extract_key_info("collect 20 photos of the lake within 3 days", "en", &lexicon(), &cfg()).unwrap();
        assert_eq!(info.topic, "photo-collection");
        assert_eq!(info.participant_count, Some(20));
        assert_eq!(info.duration_days, Some(3.0));
        assert_eq!(info.location.unwrap().name.as_deref(), Some("lake"));
    }

    #[test]
    fn street_noise() {
        let info = extract_key_info("record street noise levels", "en", &lexicon(), &cfg()).unwrap();
        assert_eq!(info.topic, "audio-collection");
        assert_eq!(info.manner.as_deref(), Some("record"));
    }

    #[test]
    fn no_topic() {
        assert!(matches!(
            extract_key_info("xyzzy plugh", "en", &lexicon(), &cfg()),
            Err(ResolutionError::NoTopicFound)
        ));
    }

    #[test]
    fn unsegmented_language_uses_substring_search() {
        let lex = Lexicon::from_json(r#"[{"keyword": "照片", "topic": "photo-collection"}]"#).unwrap();
        let info = extract_key_info("收集湖边照片", "zh", &lex, &cfg()).unwrap();
        assert_eq!(info.topic, "photo-collection");
    }

    #[test]
    fn conflicting_keyword_rejected() {
        let err = Lexicon::from_json(r#"[{"keyword": "photo", "topic": "a"}, {"keyword": "photo", "topic": "b"}]"#)
            .unwrap_err();
        assert!(matches!(err, ResolutionError::ConflictingKeyword { .. }));
    }

    #[test]
    fn lexicon_change_changes_schema_hash() {
        let caps = cfg().caps;
        let classes = vec!["sensing-collection".to_string()];
        let a = VectorSchema::new(&classes, &lexicon(), caps);
        let mut entries = lexicon().entries().to_vec();
        entries.push(LexEntry { keyword: "video".into(), topic: Some("video-collection".into()), slot: None });
        let b = VectorSchema::new(&classes, &Lexicon::new(entries).unwrap(), caps);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), VectorSchema::new(&classes, &lexicon(), caps).hash());
    }

    #[test]
    fn encode_scalars() {
        let schema = VectorSchema::new(&["sensing-collection".to_string()], &lexicon(), cfg().caps);
        let info = KeyInfo { topic: "photo-collection".into(), participant_count: Some(20), ..Default::default() };
        let v = encode(&info, &DiscreteFeatures::default(), "sensing-collection", &schema);
        assert_eq!(v.0.len(), schema.dims());
        let at = |name: &str| v.0[schema.index_of(name).unwrap()];
        assert_eq!(at("participant_count"), 0.2);
        assert_eq!(at("has_location"), 0.0);
        assert_eq!(at("radius"), 0.0);
        assert_eq!(at("class:sensing-collection"), 1.0);
        assert_eq!(at("topic:photo-collection"), 1.0);
        assert_eq!(v, encode(&info, &DiscreteFeatures::default(), "sensing-collection", &schema));
    }

    #[test]
    fn clarity_bounds() {
        let empty = KeyInfo::default();
        assert_eq!(empty.clarity(1.0), 1.0);
        let full = KeyInfo {
            topic: "t".into(),
            manner: Some("m".into()),
            location: Some(LocationRef::default()),
            duration_days: Some(1.0),
            participant_count: Some(1),
            keywords: BTreeSet::new(),
        };
        assert_eq!(full.clarity(1.0), 10.0);
    }
}
