//! Every tunable with its default, so a change to any of them shows up here.

use std::io::Write;

use crowd_kernel::config::KernelConfig;
use crowd_kernel::quality::Rn;
use crowd_kernel::scheduler::{BoostDirection, Policy};

#[test]
fn defaults() {
    let c = KernelConfig::default();
    assert_eq!(c.delta, 0.8);
    assert_eq!(c.classifications, ["sensing-collection", "data-annotation", "questionnaire", "design"]);
    assert_eq!(c.default_weights.0, [0.2; 5]);
    assert_eq!(c.weights_for("sensing-collection").0, [0.3, 0.2, 0.2, 0.2, 0.1]);
    assert_eq!(c.weights_for("data-annotation").0, [0.2, 0.3, 0.2, 0.2, 0.1]);
    assert_eq!(c.weights_for("design").0, [0.2; 5]);

    assert_eq!((c.alarm_thresholds.cpu, c.alarm_thresholds.storage), (90.0, 90.0));
    assert_eq!((c.availability.min_power, c.availability.max_usage), (5.0, 95.0));

    let m = &c.mutation_steps;
    assert_eq!(m.range_increase_ratio, 0.5);
    assert_eq!(m.reward_increase_ratio, 0.2);
    assert_eq!(m.reward_min_increase, 1.0);
    assert_eq!(m.u_credit_set, 70.0);
    assert_eq!(m.credit_penalty, 20.0);
    assert_eq!(m.corrected_format, "uniform");

    let s = &c.scheduler;
    assert_eq!(s.default_policy, Policy::Fcfs);
    assert_eq!(s.quantum, 1);
    assert_eq!(s.feedback_boost_direction, BoostDirection::Urgent);
    assert!(s.immediate_processing);
    assert_eq!(s.slots_per_tick, 4);

    let r = &c.resolution;
    assert_eq!((r.caps.count, r.caps.radius_m, r.caps.duration_days, r.caps.reward), (100.0, 10_000.0, 30.0, 1000.0));
    assert_eq!(r.unsegmented_langs, ["zh", "ja", "ko", "th"]);
    assert_eq!(r.min_clarity, 1.0);
    assert_eq!(r.default_range_m, 1000.0);
    assert_eq!(r.default_prio, 8);
    assert_eq!(r.default_format, "any");
    assert_eq!(r.ticks_per_day, 86_400);

    assert_eq!((c.assignment.temperature, c.assignment.learning_rate), (1.0, 0.1));

    let q = &c.quality;
    assert_eq!(q.max_rounds, 5);
    assert_eq!(q.deep_score_threshold, 0.5);
    assert_eq!(q.small_range_m, 2000.0);
    assert_eq!(q.low_reward, 10.0);
    assert_eq!(q.similarity_threshold, 0.9);
    assert_eq!((q.prune.max_retrievals, q.prune.min_age), (1, 30 * 86_400));
    assert_eq!(q.rdt_maintenance_every, None);
    assert_eq!(q.dsp_reasons, [0x01, 0x02, 0x03, 0x0201, 0x0202].map(Rn));

    let d = &c.data;
    assert_eq!((d.time_bucket, d.geo_cell_m, d.kb_max_items, d.cleanup_min_age), (86_400, 1000.0, 10_000, 86_400));

    let k = &c.cost_model;
    assert_eq!((k.zeta_a, k.eta_a, k.zeta_b, k.eta_b), (30.0, 1.0, 6.0, 1.0));
}

type Edit = fn(&mut serde_json::Value);

fn with(edit: impl FnOnce(&mut serde_json::Value)) -> Result<KernelConfig, String> {
    let mut v = serde_json::to_value(KernelConfig::default()).unwrap();
    edit(&mut v);
    let cfg: KernelConfig = serde_json::from_value(v).map_err(|e| e.to_string())?;
    cfg.validate().map(|_| cfg).map_err(|e| e.field().unwrap_or("").to_string())
}

#[test]
fn each_section_names_itself_when_invalid() {
    let cases: [(&str, Edit); 11] = [
        ("delta", |v| v["delta"] = 0.0.into()),
        ("weight_table", |v| v["weight_table"]["design"] = serde_json::json!([0.1, 0.2, 0.2, 0.2, 0.2])),
        ("default_weights", |v| v["default_weights"] = serde_json::json!([0.5, 0.5, 0.5, 0.0, 0.0])),
        ("alarm_thresholds", |v| v["alarm_thresholds"]["cpu"] = 0.0.into()),
        ("availability", |v| v["availability"]["min_power"] = 120.0.into()),
        ("mutation_steps", |v| v["mutation_steps"]["u_credit_set"] = 101.0.into()),
        ("scheduler", |v| v["scheduler"]["quantum"] = 0.into()),
        ("resolution", |v| v["resolution"]["default_prio"] = 16.into()),
        ("assignment", |v| v["assignment"]["temperature"] = 0.0.into()),
        ("quality", |v| v["quality"]["similarity_threshold"] = 1.5.into()),
        ("data", |v| v["data"]["kb_max_items"] = 0.into()),
    ];
    for (field, edit) in cases {
        assert_eq!(with(edit).unwrap_err(), field);
    }
    assert!(with(|_| {}).is_ok());
}

#[test]
fn env_var_is_the_fallback_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.json");
    let mut v = serde_json::to_value(KernelConfig::default()).unwrap();
    v["delta"] = 0.65.into();
    std::fs::File::create(&path).unwrap().write_all(v.to_string().as_bytes()).unwrap();

    std::env::set_var("CROWD_KERNEL_CONFIG", &path);
    assert_eq!(KernelConfig::resolve(None).unwrap().delta, 0.65);
    let shipped = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/config.json");
    assert_eq!(KernelConfig::resolve(Some(shipped.as_ref())).unwrap().delta, 0.8);
    std::env::remove_var("CROWD_KERNEL_CONFIG");
    assert_eq!(KernelConfig::resolve(None).unwrap().delta, 0.8);
}
