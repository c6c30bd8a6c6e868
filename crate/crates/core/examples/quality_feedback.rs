//! Scores a result, infers why it fell short and applies the corrections.

use crowd_kernel::agents::{GeoPoint, UserAgent};
use crowd_kernel::config::KernelConfig;
use crowd_kernel::kernel::{FeedbackPayload, Kernel, Submission};
use crowd_kernel::quality::{estimating_entropy, quality, EntropyInputs, QualityScores, Rn, Weights};
use crowd_kernel::task::RawTaskInput;

fn main() {
    let xi = [0.8, 1.0, 0.6, 0.9, 0.5];
    let w = Weights::new([0.3, 0.2, 0.2, 0.2, 0.1]).unwrap();
    let e = estimating_entropy(EntropyInputs { lambda: 2.0, upsilon: 2.0 }).unwrap();
    println!("Q = {:.6} with E = {e}", quality(&QualityScores::from_ratios(xi).unwrap(), &w, e).unwrap());

    let mut k = Kernel::new(KernelConfig::default(), 1).unwrap();
    for (i, x) in [15.0, 40.0, 90.0].into_iter().enumerate() {
        k.register_user(
            UserAgent::new(format!("w{i}"), GeoPoint::new(x, 0.0), 80.0).with_interests(["photo-collection"]),
        );
    }
    let mut raw = RawTaskInput::new("pub", "collect photos of the lake", "sensing-collection");
    raw.scale = Some(3);
    raw.discrete.location = Some(GeoPoint::new(0.0, 0.0));
    let published = k.publish(raw).unwrap();
    let tid = published.tid;

    for round in 0..3 {
        for u in k.tasks().spec(tid).unwrap().participants.users.clone() {
            if k.phase(tid) == Some(crowd_kernel::task::TaskPhase::Execution) {
                k.submit(tid, &u, Submission::text(format!("photo-{round}.png"))).unwrap();
            }
        }
        let mut fb = FeedbackPayload::ratios(if round == 0 { [0.6; 5] } else { [0.9; 5] });
        if round == 0 {
            fb.causes = vec![Rn(0x1002)];
            fb.format = Some("jpeg".into());
        }
        let out = k.feedback(tid, &published_publisher(), &fb).unwrap();
        println!("round {round}: Q = {:.2} ({:?}) -> {}", out.report.q, out.report.verdict, out.phase);
        if let Some(c) = &out.correction {
            let ops: Vec<String> = c.ons.iter().map(ToString::to_string).collect();
            println!(
                "  reasons {:?}, operations {ops:?}, re-entry {:?}",
                out.reasons.iter().map(ToString::to_string).collect::<Vec<_>>(),
                c.reentry
            );
            for m in &c.mutations {
                println!("  {} {}: {} -> {}", m.on.as_deref().unwrap_or("-"), m.field, m.before, m.after);
            }
        }
        if out.correction.is_none() {
            break;
        }
    }
}

fn published_publisher() -> crowd_kernel::task::UserId {
    crowd_kernel::task::UserId::new("pub")
}
