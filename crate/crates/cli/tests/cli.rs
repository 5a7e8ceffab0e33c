use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn cirrus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cirrus"))
        .args(args)
        .output()
        .unwrap()
}

fn json_of(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn run_into(scenario: &str, seed: &str, dir: &Path) -> Value {
    json_of(&cirrus(&[
        "run",
        scenario,
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ]))
}

#[test]
fn availability_prints_percent() {
    let v = json_of(&cirrus(&[
        "availability",
        "--mtbf",
        "8760",
        "--mttr",
        "0.06",
    ]));
    assert_eq!(v["percent"], 99.999);
    let bad = cirrus(&["availability", "--mtbf", "0", "--mttr", "1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("MTBF"));
}

#[test]
fn run_writes_all_outputs_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let v = run_into("kill-instance", "7", &a);
    assert_eq!(v["failovers"], 1);
    run_into("kill-instance", "7", &b);
    for f in ["report.json", "series.csv", "requests.csv", "events.ndjson"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let first = std::fs::read_to_string(a.join("events.ndjson")).unwrap();
    let line: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["time", "actor", "event", "detail"] {
        assert!(line.get(key).is_some(), "{key} missing");
    }
}

#[test]
fn run_accepts_scenario_files_with_descriptor_files() {
    let tmp = tempfile::tempdir().unwrap();
    let composite = include_str!("../../core/scenarios/three-tier.composite");
    std::fs::write(tmp.path().join("app.composite"), composite).unwrap();
    let scenario = serde_json::json!({
        "name": "file-scenario",
        "applications": [{"descriptor_file": "app.composite", "service_time_ms": 20.0}],
        "workloads": [{"application": "DistributedApplication", "total_connections": 20,
            "requests_per_connection": 2, "rate": {"low": 2, "high": 2}}]
    });
    let path = tmp.path().join("s.json");
    std::fs::write(&path, scenario.to_string()).unwrap();
    let v = run_into(path.to_str().unwrap(), "1", &tmp.path().join("out"));
    assert_eq!(v["scenario"], "file-scenario");
    assert_eq!(v["aggregate"]["total"], 40);
}

#[test]
fn overhead_compares_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let (b, p) = (tmp.path().join("b"), tmp.path().join("p"));
    run_into("overhead-baseline", "3", &b);
    run_into("overhead-platform", "3", &p);
    let v = json_of(&cirrus(&[
        "overhead",
        b.to_str().unwrap(),
        p.to_str().unwrap(),
    ]));
    assert_eq!(v["overhead_percent"], 2.5);
    let same = json_of(&cirrus(&[
        "overhead",
        b.to_str().unwrap(),
        b.to_str().unwrap(),
    ]));
    assert_eq!(same["overhead"], 0.0);
    let missing = cirrus(&[
        "overhead",
        b.to_str().unwrap(),
        tmp.path().join("nope").to_str().unwrap(),
    ]);
    assert!(!missing.status.success());
}

#[test]
fn recovery_reports_leader_failover() {
    let v = json_of(&cirrus(&["recovery", "kill-leader", "--seed", "7"]));
    assert_eq!(v["completed"], 1);
    let total = v["mean_leader_total_ms"].as_f64().unwrap();
    assert!((168_000.0..=252_000.0).contains(&total), "{total}");
}

#[test]
fn unknown_scenario_fails() {
    let out = cirrus(&["run", "no-such-scenario", "--out", "/nonexistent"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-scenario"));
}

#[test]
fn talks_to_a_separate_server() {
    let mut server = Command::new(env!("CARGO_BIN_EXE_cirrus"))
        .args(["serve", "--addr", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .expect("listening line")
        .to_string();
    let v = json_of(&cirrus(&["--server", &url, "scenarios"]));
    assert!(v.as_array().unwrap().iter().any(|n| n == "kill-leader"));
    let v = json_of(&cirrus(&[
        "--server",
        &url,
        "availability",
        "--mtbf",
        "8760",
        "--mttr",
        "7.5",
    ]));
    assert_eq!(v["percent"], 99.914);
    server.kill().unwrap();
    server.wait().unwrap();
    let down = cirrus(&["--server", &url, "scenarios"]);
    assert!(!down.status.success());
}
