//! Turns a free-text description into key information, a task vector and a
//! task agent.

use crowd_kernel::agents::Tpid;
use crowd_kernel::config::KernelConfig;
use crowd_kernel::resolution::{decode_to_agent, encode, extract_key_info};
use crowd_kernel::task::{RawTaskInput, TaskTable};

fn main() {
    let cfg = KernelConfig::default();
    let fx = cfg.load_fixtures().unwrap();
    let text = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "collect photos of the lake within 500m for 3 days, 10 participants".into());

    let info = match extract_key_info(&text, "en", &fx.lexicon, &cfg.resolution) {
        Ok(info) => info,
        Err(e) => {
            println!("could not resolve: {e}");
            return;
        }
    };
    println!(
        "topic {:?}, location {:?}, days {:?}, count {:?}",
        info.topic, info.location, info.duration_days, info.participant_count
    );
    println!("clarity {:.1} / 10", info.clarity(cfg.resolution.min_clarity));

    let mut raw = RawTaskInput::new("alice", &text, "sensing-collection");
    raw.scale = Some(10);
    let vector = encode(&info, &raw.discrete, &raw.classification, &fx.schema);
    println!("vector has {} dims, schema {}", vector.0.len(), fx.schema.hash());
    let nonzero: Vec<_> = fx.schema.feature_names().into_iter().zip(&vector.0).filter(|(_, v)| **v != 0.0).collect();
    println!("non-zero features: {nonzero:?}");

    let mut tasks = TaskTable::default();
    let tid = tasks.create(&raw, &cfg.classifications, 0).unwrap();
    let agent = decode_to_agent(&tasks, tid, Tpid(1), &vector, &info, &raw.discrete, &cfg.resolution).unwrap();
    println!("agent: range {} m, prio {}, format {:?}", agent.range, agent.prio, agent.format);
}
