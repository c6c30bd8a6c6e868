//! Runs every shipped assignment strategy over the same candidate pool.

use crowd_kernel::agents::{AgentStore, GeoPoint, LocationRef, ProcessAgent, TaskAgent, TaskInfo, Tpid, UserAgent};
use crowd_kernel::assignment::{assign, select_strategy, SasModel, StrategyLibrary};
use crowd_kernel::config::KernelConfig;
use crowd_kernel::scheduler::Policy;
use crowd_kernel::task::{TaskPhase, Tid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = KernelConfig::default();
    let fx = cfg.load_fixtures().unwrap();
    let library = StrategyLibrary::from_specs(&fx.strategies, &fx.schema).unwrap();
    let model =
        SasModel::new(&library, fx.schema.dims(), cfg.assignment.temperature, cfg.assignment.learning_rate).unwrap();

    let mut store = AgentStore::new(cfg.alarm_thresholds, cfg.availability);
    let people = [
        ("ana", 50.0, 0.0, 85.0, vec!["photo-collection"]),
        ("ben", 120.0, 30.0, 40.0, vec![]),
        ("cai", 300.0, -80.0, 95.0, vec!["photo-collection", "traffic-monitoring"]),
        ("dee", 900.0, 0.0, 70.0, vec!["photo-collection"]),
        ("eli", 20.0, 10.0, 65.0, vec!["questionnaire"]),
    ];
    for (id, x, y, credit, tags) in people {
        store.upsert_user(UserAgent::new(id, GeoPoint::new(x, y), credit).with_interests(tags));
    }
    let mut vector = vec![0.0; fx.schema.dims()];
    vector[fx.schema.index_of("class:sensing-collection").unwrap_or(0)] = 1.0;
    let task = TaskAgent {
        task_id: Tid(1),
        tpid: Tpid(1),
        process_state: TaskPhase::Allocation,
        prio: 8,
        task_info: TaskInfo {
            location: Some(LocationRef { point: Some(GeoPoint::new(0.0, 0.0)), ..Default::default() }),
            topic: "photo-collection".into(),
            participant_count: Some(2),
            vector,
            ..Default::default()
        },
        device_num: 0,
        device_ids: vec![],
        sensing_data: None,
        range: 1000.0,
        reward: 5.0,
        format: "jpeg".into(),
        u_credit: 0.0,
        submit_state: Default::default(),
        correction_bit: vec![],
    };
    store.insert_task(task, ProcessAgent::new(Tpid(1), Tid(1), Policy::Fcfs, 8, 0));
    let trg = store.build_trg(Tid(1)).unwrap();

    let selection = select_strategy(&trg, &model, &library).unwrap();
    println!("model picks strategy {} from {:?}", selection.strategy_id, selection.probabilities);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for id in library.ids() {
        let s = library.get(id).unwrap();
        match assign(&trg, s, 2, &mut rng) {
            Ok(r) => println!(
                "{:>2} {:<18} -> {:?}",
                id,
                s.name,
                r.user_ids().iter().map(|u| u.0.as_str()).collect::<Vec<_>>()
            ),
            Err(e) => println!("{:>2} {:<18} -> {e}", id, s.name),
        }
    }
}
