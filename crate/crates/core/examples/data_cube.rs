//! Stores task records in the cube index, queries them and moves analyzed
//! data into the knowledge base on cleanup.

use crowd_kernel::agents::GeoPoint;
use crowd_kernel::config::KernelConfig;
use crowd_kernel::data::{
    descriptor, CleanupPolicy, CubeQuery, DataKind, DataRecord, DataStore, KnowledgeBase, Modality, Payload,
};
use crowd_kernel::task::{PhaseEvent, RawTaskInput, TaskTable};
use serde_json::json;

fn main() {
    let cfg = KernelConfig::default();
    let mut tasks = TaskTable::default();
    let mut raw = RawTaskInput::new("alice", "noise levels on main street", "sensing-collection");
    raw.scale = Some(1);
    let tid = tasks.create(&raw, &cfg.classifications, 0).unwrap();

    let mut store = DataStore::new(&cfg.data);
    for (i, (x, day)) in [(100.0, 0), (2500.0, 0), (150.0, 1), (4200.0, 3)].into_iter().enumerate() {
        let rec = DataRecord {
            record_id: 0,
            task_id: tid,
            kind: DataKind::Rd,
            modality: Modality::Text,
            payload: Payload::Inline { value: json!({"db": 60 + i * 5}) },
            uploader: "alice".into(),
            timestamp: day * cfg.data.time_bucket + 10,
            geo: Some(GeoPoint::new(x, 0.0)),
            analyzed: false,
        };
        let id = store.store(rec, tasks.spec(tid).unwrap()).unwrap();
        store.mark_analyzed(id);
    }
    println!("{} records in {} cells", store.len(), store.cell_count());

    let q = CubeQuery::all().classification("sensing-collection").days(0..2).geo(0..1, 0..1);
    let hits: Vec<u64> = store.query(&q).unwrap().iter().map(|r| r.record_id).collect();
    println!("first two days, first km cell: {hits:?}");

    for ev in [
        PhaseEvent::Submit,
        PhaseEvent::Analyze,
        PhaseEvent::Assign,
        PhaseEvent::Upload,
        PhaseEvent::Process,
        PhaseEvent::Evaluate(1.0),
    ] {
        tasks.advance(tid, ev, cfg.delta).unwrap();
    }
    let mut kb = KnowledgeBase::new(cfg.data.kb_max_items);
    let report = store
        .cleanup_completed(CleanupPolicy { min_age: 0 }, 10 * cfg.data.time_bucket, |t| tasks.phase(t), &mut kb)
        .unwrap();
    println!("cleanup removed {:?}, knowledge items {:?}", report.removed, report.transferred);
    let found = kb.search(&descriptor(["classification=sensing-collection", "day=0"]));
    let addresses: Vec<&str> = found.iter().map(|k| k.address.as_str()).collect();
    println!("best matches for day 0 sensing data: {addresses:?}");
}
