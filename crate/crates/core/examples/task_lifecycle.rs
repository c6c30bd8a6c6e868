//! Walks one task through the phase machine, including a correction detour.

use crowd_kernel::task::{advance_phase, PhaseEvent, RawTaskInput, TaskPhase, TaskTable};

fn main() {
    let classes = vec!["questionnaire".to_string()];
    let mut tasks = TaskTable::default();
    let mut raw = RawTaskInput::new("alice", "fill in the commuting survey", "questionnaire");
    raw.scale = Some(20);
    let tid = tasks.create(&raw, &classes, 0).expect("valid input");
    println!("{tid} created in {:?}", tasks.phase(tid).unwrap());

    let delta = 0.8;
    let script = [
        PhaseEvent::Submit,
        PhaseEvent::Analyze,
        PhaseEvent::Assign,
        PhaseEvent::Upload,
        PhaseEvent::Process,
        PhaseEvent::Evaluate(0.55),
        PhaseEvent::Correct(TaskPhase::Allocation),
        PhaseEvent::Assign,
        PhaseEvent::Upload,
        PhaseEvent::Process,
        PhaseEvent::Evaluate(0.9),
    ];
    for ev in script {
        let phase = tasks.advance(tid, ev, delta).unwrap();
        println!("  {ev:?} -> {phase}");
    }

    // anything else is refused
    match advance_phase(TaskPhase::Termination, PhaseEvent::Submit, delta) {
        Ok(p) => println!("unexpected: {p}"),
        Err(e) => println!("after termination: {e}"),
    }
}
