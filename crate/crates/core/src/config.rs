//! Kernel configuration and fixture loading.
//!
//! One JSON file holds every tunable. Fixture tables (lexicon, strategy
//! library, problem causes, correction operations, mapping table, reason
//! rules) are referenced by paths relative to the config file; when a path
//! is absent the built-in copy is used.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{StrategyLibrary, StrategySpec};
use crate::quality::{Pcl, ReasonRules, Rn, Rsmt, Scol, Weights};
use crate::resolution::{Lexicon, NormalizationCaps, VectorSchema};
use crate::scheduler::{BoostDirection, Policy, MAX_PRIO};

pub const ENV_VAR: &str = "CROWD_KERNEL_CONFIG";

const LEXICON: &str = include_str!("../fixtures/lexicon.json");
const STRATEGIES: &str = include_str!("../fixtures/strategies.json");
const PCL: &str = include_str!("../fixtures/pcl.json");
const SCOL: &str = include_str!("../fixtures/scol.json");
const RSMT: &str = include_str!("../fixtures/rsmt.json");
const REASON_RULES: &str = include_str!("../fixtures/reason_rules.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid {field}: {detail}")]
    Validation { field: String, detail: String },
}

impl ConfigError {
    fn invalid(field: &str, detail: impl ToString) -> Self {
        ConfigError::Validation { field: field.to_string(), detail: detail.to_string() }
    }

    /// Name of the offending field for validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Validation { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// Environment-agent alarm levels, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlarmThresholds {
    pub cpu: f64,
    pub storage: f64,
}

/// Floors a device must meet to count as available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityConfig {
    /// Minimum remaining power, percent.
    pub min_power: f64,
    /// Maximum usage, percent.
    pub max_usage: f64,
}

impl AvailabilityConfig {
    pub fn is_available(&self, power: f64, usage: f64) -> bool {
        power >= self.min_power && usage <= self.max_usage
    }
}

/// Step sizes used by correction operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationSteps {
    pub range_increase_ratio: f64,
    pub reward_increase_ratio: f64,
    /// Lower bound on a reward increase, so zero rewards still grow.
    pub reward_min_increase: f64,
    pub u_credit_set: f64,
    pub credit_penalty: f64,
    /// Format applied when a format correction names none.
    pub corrected_format: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub default_policy: Policy,
    pub quantum: u64,
    pub feedback_boost_direction: BoostDirection,
    /// Dispatch queued processing work as soon as it is enqueued. When off,
    /// work waits for [`crate::protocol::Kernel::tick`].
    pub immediate_processing: bool,
    /// Processes dispatched per tick.
    pub slots_per_tick: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionConfig {
    pub caps: NormalizationCaps,
    /// Languages written without spaces; keywords are matched as substrings.
    pub unsegmented_langs: Vec<String>,
    pub min_clarity: f64,
    pub default_range_m: f64,
    pub default_prio: u8,
    pub default_format: String,
    pub ticks_per_day: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentConfig {
    pub temperature: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Nodes retrieved this many times or more are kept.
    pub max_retrievals: u64,
    /// Ticks since last retrieval before a node may go.
    pub min_age: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    pub max_rounds: u32,
    pub deep_score_threshold: f64,
    /// Tasks with a smaller range carry the `small_range` feature.
    pub small_range_m: f64,
    /// Tasks with a smaller reward carry the `low_reward` feature.
    pub low_reward: f64,
    pub similarity_threshold: f64,
    pub prune: PruneConfig,
    /// Run a prune sweep after every N terminated tasks.
    pub rdt_maintenance_every: Option<u64>,
    /// Reasons of the data-sparsity class, which try repository
    /// compensation before correction.
    pub dsp_reasons: Vec<Rn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub time_bucket: u64,
    pub geo_cell_m: f64,
    pub kb_max_items: usize,
    pub cleanup_min_age: u64,
}

/// Cost constants for the optimization-time comparison, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub zeta_a: f64,
    pub eta_a: f64,
    pub zeta_b: f64,
    pub eta_b: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let all = [self.zeta_a, self.eta_a, self.zeta_b, self.eta_b];
        if all.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(ConfigError::invalid("cost_model", "costs must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixturePaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategies: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pcl: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scol: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rsmt: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason_rules: Option<PathBuf>,
}

/// Sections left out of a config file take their default values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub delta: f64,
    pub classifications: Vec<String>,
    /// Weights for classifications missing from `weight_table`.
    pub default_weights: Weights,
    pub weight_table: BTreeMap<String, Weights>,
    pub alarm_thresholds: AlarmThresholds,
    pub availability: AvailabilityConfig,
    pub mutation_steps: MutationSteps,
    pub scheduler: SchedulerConfig,
    pub resolution: ResolutionConfig,
    pub assignment: AssignmentConfig,
    pub quality: QualityConfig,
    pub data: DataConfig,
    pub cost_model: CostModel,
    pub fixtures: FixturePaths,
    /// Expected vector schema hash; a mismatch fails validation.
    pub vector_schema_hash: Option<String>,
    /// Directory fixture paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            delta: 0.8,
            classifications: ["sensing-collection", "data-annotation", "questionnaire", "design"]
                .map(String::from)
                .to_vec(),
            default_weights: Weights::UNIFORM,
            weight_table: BTreeMap::from([
                ("sensing-collection".to_string(), Weights([0.3, 0.2, 0.2, 0.2, 0.1])),
                ("data-annotation".to_string(), Weights([0.2, 0.3, 0.2, 0.2, 0.1])),
            ]),
            alarm_thresholds: AlarmThresholds { cpu: 90.0, storage: 90.0 },
            availability: AvailabilityConfig { min_power: 5.0, max_usage: 95.0 },
            mutation_steps: MutationSteps {
                range_increase_ratio: 0.5,
                reward_increase_ratio: 0.2,
                reward_min_increase: 1.0,
                u_credit_set: 70.0,
                credit_penalty: 20.0,
                corrected_format: "uniform".to_string(),
            },
            scheduler: SchedulerConfig {
                default_policy: Policy::Fcfs,
                quantum: 1,
                feedback_boost_direction: BoostDirection::Urgent,
                immediate_processing: true,
                slots_per_tick: 4,
            },
            resolution: ResolutionConfig {
                caps: NormalizationCaps { count: 100.0, radius_m: 10_000.0, duration_days: 30.0, reward: 1000.0 },
                unsegmented_langs: ["zh", "ja", "ko", "th"].map(String::from).to_vec(),
                min_clarity: 1.0,
                default_range_m: 1000.0,
                default_prio: 8,
                default_format: "any".to_string(),
                ticks_per_day: 86_400,
            },
            assignment: AssignmentConfig { temperature: 1.0, learning_rate: 0.1 },
            quality: QualityConfig {
                max_rounds: 5,
                deep_score_threshold: 0.5,
                small_range_m: 2000.0,
                low_reward: 10.0,
                similarity_threshold: 0.9,
                prune: PruneConfig { max_retrievals: 1, min_age: 30 * 86_400 },
                rdt_maintenance_every: None,
                dsp_reasons: vec![Rn(0x01), Rn(0x02), Rn(0x03), Rn(0x0201), Rn(0x0202)],
            },
            data: DataConfig { time_bucket: 86_400, geo_cell_m: 1000.0, kb_max_items: 10_000, cleanup_min_age: 86_400 },
            cost_model: CostModel { zeta_a: 30.0, eta_a: 1.0, zeta_b: 6.0, eta_b: 1.0 },
            fixtures: FixturePaths::default(),
            vector_schema_hash: None,
            base_dir: None,
        }
    }
}

/// Parsed and cross-checked fixture tables.
#[derive(Debug, Clone)]
pub struct Fixtures {
    pub lexicon: Lexicon,
    pub strategies: Vec<StrategySpec>,
    pub pcl: Pcl,
    pub scol: Scol,
    pub rsmt: Rsmt,
    pub reason_rules: ReasonRules,
    pub schema: VectorSchema,
}

impl KernelConfig {
    /// Reads, parses and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), detail: e.to_string() })?;
        let mut cfg: KernelConfig = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Uses `path` if given, else the `CROWD_KERNEL_CONFIG` variable, else
    /// the defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path.map(Path::to_path_buf).or_else(|| std::env::var_os(ENV_VAR).map(PathBuf::from)) {
            Some(p) => KernelConfig::load(p),
            None => Ok(KernelConfig::default()),
        }
    }

    pub fn weights_for(&self, classification: &str) -> Weights {
        self.weight_table.get(classification).copied().unwrap_or(self.default_weights)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_scalars()?;
        self.load_fixtures().map(|_| ())
    }

    fn validate_scalars(&self) -> Result<(), ConfigError> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(ConfigError::invalid("delta", format!("{} is outside (0, 1]", self.delta)));
        }
        let classes: BTreeSet<&String> = self.classifications.iter().collect();
        if classes.is_empty() || classes.len() != self.classifications.len() {
            return Err(ConfigError::invalid("classifications", "must be non-empty and unique"));
        }
        self.default_weights.validate().map_err(|e| ConfigError::invalid("default_weights", e))?;
        for (class, w) in &self.weight_table {
            if !classes.contains(class) {
                return Err(ConfigError::invalid("weight_table", format!("unknown classification {class}")));
            }
            w.validate().map_err(|e| ConfigError::invalid("weight_table", format!("{class}: {e}")))?;
        }
        let pct = |v: f64| v > 0.0 && v <= 100.0;
        if !(pct(self.alarm_thresholds.cpu) && pct(self.alarm_thresholds.storage)) {
            return Err(ConfigError::invalid("alarm_thresholds", "must be in (0, 100]"));
        }
        let a = &self.availability;
        if !((0.0..=100.0).contains(&a.min_power) && (0.0..=100.0).contains(&a.max_usage)) {
            return Err(ConfigError::invalid("availability", "must be in [0, 100]"));
        }
        let m = &self.mutation_steps;
        let steps = [m.range_increase_ratio, m.reward_increase_ratio, m.reward_min_increase, m.credit_penalty];
        if steps.iter().any(|s| !(s.is_finite() && *s >= 0.0)) || !(0.0..=100.0).contains(&m.u_credit_set) {
            return Err(ConfigError::invalid("mutation_steps", "steps must be non-negative, u_credit_set in [0, 100]"));
        }
        if self.scheduler.quantum == 0 || self.scheduler.slots_per_tick == 0 {
            return Err(ConfigError::invalid("scheduler", "quantum and slots_per_tick must be positive"));
        }
        let r = &self.resolution;
        let caps = [r.caps.count, r.caps.radius_m, r.caps.duration_days, r.caps.reward];
        if caps.iter().any(|c| !(c.is_finite() && *c > 0.0))
            || r.ticks_per_day == 0
            || r.default_range_m.is_nan()
            || r.default_range_m < crate::agents::MIN_RANGE_M
            || r.default_prio > MAX_PRIO
            || !(r.min_clarity > 0.0 && r.min_clarity <= 10.0)
        {
            return Err(ConfigError::invalid("resolution", "caps, range, prio or clarity out of range"));
        }
        let asg = &self.assignment;
        if !(asg.temperature > 0.0 && asg.temperature.is_finite() && asg.learning_rate >= 0.0) {
            return Err(ConfigError::invalid("assignment", "temperature must be positive, learning rate non-negative"));
        }
        let q = &self.quality;
        if !(q.deep_score_threshold >= 0.0 && q.similarity_threshold > 0.0 && q.similarity_threshold <= 1.0)
            || q.rdt_maintenance_every == Some(0)
        {
            return Err(ConfigError::invalid("quality", "thresholds out of range"));
        }
        let d = &self.data;
        if d.time_bucket == 0 || d.geo_cell_m.is_nan() || d.geo_cell_m <= 0.0 || d.kb_max_items == 0 {
            return Err(ConfigError::invalid("data", "bucket sizes and KB cap must be positive"));
        }
        self.cost_model.validate()
    }

    fn read_fixture(&self, field: &str, path: &Option<PathBuf>, builtin: &'static str) -> Result<String, ConfigError> {
        match path {
            None => Ok(builtin.to_string()),
            Some(p) => {
                let full = match &self.base_dir {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p.clone(),
                };
                fs::read_to_string(&full).map_err(|e| ConfigError::invalid(field, format!("{}: {e}", full.display())))
            }
        }
    }

    /// Parses every fixture table and checks their cross references.
    pub fn load_fixtures(&self) -> Result<Fixtures, ConfigError> {
        let f = &self.fixtures;
        let lexicon = Lexicon::from_json(&self.read_fixture("lexicon", &f.lexicon, LEXICON)?)
            .map_err(|e| ConfigError::invalid("lexicon", e))?;
        let strategies: Vec<StrategySpec> =
            serde_json::from_str(&self.read_fixture("strategies", &f.strategies, STRATEGIES)?)
                .map_err(|e| ConfigError::invalid("strategies", e))?;
        let pcl =
            Pcl::from_json(&self.read_fixture("pcl", &f.pcl, PCL)?).map_err(|e| ConfigError::invalid("pcl", e))?;
        let scol =
            Scol::from_json(&self.read_fixture("scol", &f.scol, SCOL)?).map_err(|e| ConfigError::invalid("scol", e))?;
        let rsmt =
            Rsmt::from_json(&self.read_fixture("rsmt", &f.rsmt, RSMT)?).map_err(|e| ConfigError::invalid("rsmt", e))?;
        let reason_rules = ReasonRules::from_json(&self.read_fixture("reason_rules", &f.reason_rules, REASON_RULES)?)
            .map_err(|e| ConfigError::invalid("reason_rules", e))?;

        rsmt.cross_check(&pcl, &scol).map_err(|e| ConfigError::invalid("rsmt", e))?;
        reason_rules.cross_check(&pcl).map_err(|e| ConfigError::invalid("reason_rules", e))?;
        if let Some(rn) = self.quality.dsp_reasons.iter().find(|rn| pcl.get(**rn).is_none()) {
            return Err(ConfigError::invalid("quality", format!("unknown reason {rn} in dsp_reasons")));
        }

        let schema = VectorSchema::new(&self.classifications, &lexicon, self.resolution.caps);
        StrategyLibrary::from_specs(&strategies, &schema).map_err(|e| ConfigError::invalid("strategies", e))?;
        if let Some(expected) = &self.vector_schema_hash {
            let actual = schema.hash();
            if *expected != actual {
                return Err(ConfigError::invalid(
                    "vector_schema_hash",
                    format!("expected {expected}, schema is {actual}"),
                ));
            }
        }
        Ok(Fixtures { lexicon, strategies, pcl, scol, rsmt, reason_rules, schema })
    }
}
