use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Command, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_crowd-kernel");
const ROOT: &str = env!("CARGO_MANIFEST_DIR");

#[test]
fn sim_writes_metrics_and_is_repeatable() {
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let status = Command::new(BIN)
            .args(["sim", "--scenario", &format!("{ROOT}/scenarios/campus.json"), "--seed", "7", "--out"])
            .arg(dir.path())
            .env("CROWD_KERNEL_CONFIG", format!("{ROOT}/fixtures/config.json"))
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let files = ["tasks.csv", "queue_waits.csv", "summary.json", "state.json"];
        outputs.push(files.map(|f| std::fs::read(dir.path().join(f)).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let csv = String::from_utf8(outputs[0][0].clone()).unwrap();
    assert!(csv.starts_with("tid,"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn eval_tro_prints_flat_cost_b() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["eval", "--tro", "--n", "10,100", "--v", "5", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("cost_B 0.000000"), "{text}");
    assert!(dir.path().join("tro.csv").exists() && dir.path().join("tro.svg").exists());
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"delta\": 2.0}").unwrap();
    let out = Command::new(BIN).args(["eval", "--tro", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta"));
}

#[test]
fn serve_answers_on_the_socket() {
    let mut child = Command::new(BIN).args(["serve", "--port", "0"]).stdout(Stdio::piped()).spawn().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut banner = String::new();
    stdout.read_line(&mut banner).unwrap();
    let addr = banner.trim().strip_prefix("listening on ").unwrap().to_string();

    let stream = TcpStream::connect(&addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    writeln!(writer, r#"{{"seq":1,"kind":"ListTasks","tid":null,"payload":{{"user":"alice"}}}}"#).unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    let reply: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(reply["seq"], 1);
    assert_eq!(reply["kind"], "TaskList");
}
