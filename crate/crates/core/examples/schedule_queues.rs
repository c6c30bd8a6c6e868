//! Drains the same workload under each scheduling policy.

use crowd_kernel::agents::Tpid;
use crowd_kernel::scheduler::{boosted_prio, BoostDirection, Policy, QueueEntry, ReadyQueue};

fn main() {
    // (arrival, service, prio)
    let jobs = [(0, 8, 4), (1, 2, 9), (2, 5, 0), (3, 1, 9), (4, 3, 2)];
    for policy in [Policy::Fcfs, Policy::Priority, Policy::Hrrn, Policy::FeedbackPriority] {
        let mut q = ReadyQueue::new(policy, 1).unwrap();
        for (i, (a, s, p)) in jobs.iter().enumerate() {
            q.push(QueueEntry::new(Tpid(i as u64), *a, *s, *p));
        }
        let mut now = 5;
        let mut order = Vec::new();
        while let Ok((tpid, entry)) = q.next_entry(now) {
            order.push(tpid.0);
            now += entry.service;
        }
        println!("{policy:<16} {order:?}");
    }

    let mut rr = ReadyQueue::new(Policy::RoundRobin, 1).unwrap();
    for i in 0..3 {
        rr.push(QueueEntry::new(Tpid(i), 0, 4, 8));
    }
    let slices: Vec<u64> = (0..9).map(|t| rr.next(t).unwrap().0).collect();
    println!("{:<16} {slices:?}", Policy::RoundRobin);

    for p in [0, 1, 8, 14, 15] {
        println!(
            "prio {p:>2}: urgent boost {:>2}, literal boost {:>2}",
            boosted_prio(p, BoostDirection::Urgent),
            boosted_prio(p, BoostDirection::Literal)
        );
    }
}
