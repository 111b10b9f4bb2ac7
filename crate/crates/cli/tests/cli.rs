use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCENARIO: &str = r#"
name = "cli"
seed = 4
initial = "MONARCHIC"
duration = 4.0
grace = 3.0

[workload]
clients_per_node = 2

[[workload.phases]]
start = 0.0
conflict_pct = 20

[[switches]]
at = 2.0
target = "DEMOCRATIC"
"#;

fn eraswitch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eraswitch")).args(args).output().unwrap()
}

fn text(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_validate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("cli.toml");
    fs::write(&sc, SCENARIO).unwrap();
    let out = dir.path().join("out");
    let r = eraswitch(&["run", text(&sc), "--out", text(&out)]);
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(r.status.success(), "{stdout}");
    assert!(stdout.contains("era 2 DEMOCRATIC"), "{stdout}");
    for f in ["trace.txt", "history.jsonl", "latency.csv", "p90.csv", "events.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let trace = out.join("trace.txt");
    let history = out.join("history.jsonl");
    assert!(eraswitch(&["validate", text(&trace), text(&history)]).status.success());
    let rep = eraswitch(&["report", text(&history)]);
    assert!(rep.status.success());
    assert!(String::from_utf8_lossy(&rep.stdout).contains("answered"));

    // delivering a command twice breaks exactly-once
    let h = fs::read_to_string(&history).unwrap();
    let dup = h.lines().find(|l| l.contains("\"deliver\"")).unwrap();
    fs::write(&history, format!("{h}{dup}\n")).unwrap();
    assert_eq!(eraswitch(&["validate", text(&trace), text(&history)]).status.code(), Some(1));
}

#[test]
fn sweep_reports_each_seed() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("cli.toml");
    fs::write(&sc, SCENARIO).unwrap();
    let r = eraswitch(&["sweep", text(&sc), "--seeds", "3"]);
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(r.status.success(), "{stdout}");
    assert!(stdout.contains("3 of 3 seeds passed"), "{stdout}");
}

#[test]
fn missing_input_is_an_error() {
    let r = eraswitch(&["report", "/nonexistent/history.jsonl"]);
    assert_eq!(r.status.code(), Some(2));
}
