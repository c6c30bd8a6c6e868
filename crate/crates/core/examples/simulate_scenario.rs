//! Runs the bundled campus scenario and prints per-task metrics.

use std::path::PathBuf;

use crowd_kernel::config::KernelConfig;
use crowd_kernel::sim::{run_scenario, Scenario};

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| root.join("scenarios/campus.json"));
    let scenario = Scenario::load(&path).unwrap();
    let cfg = KernelConfig::load(root.join("fixtures/config.json")).unwrap();
    let run = run_scenario(&scenario, cfg).unwrap();
    let m = &run.metrics;
    println!("seed {}, {} ticks, {} messages, {} alarms", m.seed, m.ticks, m.messages, m.alarms);
    println!("{:>4} {:<20} {:>8} {:>6} {:>7} {:<10}", "tid", "class", "response", "rounds", "final q", "outcome");
    for t in &m.tasks {
        println!(
            "{:>4} {:<20} {:>8} {:>6} {:>7} {:<10}",
            t.tid,
            t.classification,
            t.response_ticks.map_or("-".into(), |r| r.to_string()),
            t.rounds,
            t.final_q.map_or("-".into(), |q| format!("{q:.2}")),
            t.outcome
        );
    }
}
