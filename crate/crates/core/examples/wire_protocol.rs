//! Starts the line-protocol server on a free port and plays one task through
//! it with a publisher and two participants.

use std::time::Duration;

use crowd_kernel::config::KernelConfig;
use crowd_kernel::kernel::Kernel;
use crowd_kernel::protocol::{Client, Kind, Server};
use serde_json::json;

fn main() -> std::io::Result<()> {
    let server = Server::start("127.0.0.1:0", Kernel::new(KernelConfig::default(), 0).unwrap())?;
    let addr = server.local_addr();
    println!("server on {addr}");

    let mut workers = Vec::new();
    for (name, x) in [("w1", 10.0), ("w2", 25.0)] {
        let mut c = Client::connect(addr)?;
        let profile = json!({"location": {"x": x, "y": 0.0}, "interests": ["photo-collection"], "credit": 80.0});
        c.request(Kind::ListTasks, None, json!({"user": name, "profile": profile}))?;
        workers.push((name, c));
    }
    let mut publisher = Client::connect(addr)?;
    let task = json!({
        "publisher": "pub", "description": "collect photos of the lake", "classification": "sensing-collection",
        "scale": 2, "discrete": {"location": {"x": 0.0, "y": 0.0}},
    });
    let ack = publisher.request(Kind::Publish, None, task)?;
    println!("-> {}", ack.to_line());
    let tid = ack.tid;

    for (name, c) in &mut workers {
        if let Some(push) = c.next_push(Duration::from_secs(1))? {
            println!("{name} <- {}", push.to_line());
            let r = c.request(Kind::SubmitResult, push.tid, json!({"user": name, "value": "lake.jpeg"}))?;
            println!("{name} -> {}", r.to_line());
        }
    }
    let verdict =
        publisher.request(Kind::Feedback, tid, json!({"user": "pub", "scores": [0.9, 0.9, 0.85, 0.9, 0.8]}))?;
    println!("-> {}", verdict.to_line());
    Ok(())
}
