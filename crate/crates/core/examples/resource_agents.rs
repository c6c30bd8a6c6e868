//! Registers users and devices, raises environment alarms and builds the
//! resource graph for a task.

use crowd_kernel::agents::{
    AgentStore, DeviceStatusReport, EnvSnapshot, GeoPoint, LocationRef, ProcessAgent, TaskAgent, TaskInfo, Tpid,
    UserAgent,
};
use crowd_kernel::config::KernelConfig;
use crowd_kernel::scheduler::Policy;
use crowd_kernel::task::{TaskPhase, Tid};

fn main() {
    let cfg = KernelConfig::default();
    let mut store = AgentStore::new(cfg.alarm_thresholds, cfg.availability);
    store.upsert_user(UserAgent::new("bob", GeoPoint::new(120.0, 40.0), 75.0).with_interests(["photo-collection"]));
    store.upsert_user(UserAgent::new("carol", GeoPoint::new(3000.0, 0.0), 90.0));

    for (id, power) in [("phone-1", 64.0), ("phone-2", 3.0)] {
        let report = DeviceStatusReport {
            device_id: Some(id.into()),
            device_type: Some("android".into()),
            remaining_power: Some(power),
            usage: Some(30.0),
            storage_occupancy: Some(50.0),
            location: Some(GeoPoint::new(80.0, 10.0)),
            owner: Some("bob".into()),
        };
        let d = store.register_device(&report).unwrap();
        println!("{} available: {}", d.device_id, d.availability);
    }

    let alarms = store.update_environment(&EnvSnapshot {
        cpu_count: 8,
        cpu_util: 96.0,
        memory_used: 40.0,
        storage_used: 20.0,
        disk_free: 1 << 30,
    });
    println!("alarms: {alarms:?}");

    let tid = Tid(1);
    let task = TaskAgent {
        task_id: tid,
        tpid: Tpid(1),
        process_state: TaskPhase::Allocation,
        prio: 8,
        task_info: TaskInfo {
            location: Some(LocationRef { point: Some(GeoPoint::new(0.0, 0.0)), ..Default::default() }),
            topic: "photo-collection".into(),
            ..Default::default()
        },
        device_num: 0,
        device_ids: vec![],
        sensing_data: None,
        range: 500.0,
        reward: 5.0,
        format: "jpeg".into(),
        u_credit: 0.0,
        submit_state: Default::default(),
        correction_bit: vec![],
    };
    store.insert_task(task, ProcessAgent::new(Tpid(1), tid, Policy::Fcfs, 8, 0));
    let trg = store.build_trg(tid).unwrap();
    let users: Vec<_> = trg.users.iter().map(|u| u.user_id.to_string()).collect();
    let devices: Vec<_> = trg.devices.iter().map(|d| d.device_id.to_string()).collect();
    println!("graph for {tid}: users {users:?}, devices {devices:?}, {} edges", trg.edges.len());
}
