use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn edgepipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgepipe"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(edgepipe(&[]).status.code(), Some(2));
    assert_eq!(edgepipe(&["host", "train", "--bogus"]).status.code(), Some(2));
    assert_eq!(edgepipe(&["plan"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let o = edgepipe(&["plan", "--model", "/nonexistent.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
    let o = edgepipe(&[
        "trace",
        "analyze",
        "--raw",
        &fixture("appendix_a1.json"),
        "--series",
        "nope",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_raw_series() {
    let o = edgepipe(&[
        "trace",
        "analyze",
        "--raw",
        &fixture("appendix_a1.json"),
        "--series",
        "desktop_alone",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("avg_ms=13104.75"), "{}", stdout(&o));

    let o = edgepipe(&[
        "trace",
        "analyze",
        "--raw",
        &fixture("appendix_a1.json"),
        "--series",
        "desktop_iph16",
        "--baseline",
        "desktop_alone",
    ]);
    let s = stdout(&o);
    assert!(s.contains("44.23% decrease (~44%)"), "{s}");
}

#[test]
fn plan_picks_balanced_cut() {
    let o = edgepipe(&[
        "plan",
        "--model",
        &fixture("mlp.cfg"),
        "--costs",
        &fixture("mlp-balanced.costs"),
        "--microbatches",
        "8",
    ]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("cut=3 predicted_makespan_ms=450.00"), "{s}");
}

#[test]
fn thermal_simulate_reports_transitions() {
    let o = edgepipe(&["thermal", "simulate", "--config", &fixture("thermal.cfg")]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("fair_from=13 serious_from=17"));
}

#[test]
fn verify_ops_passes() {
    let o = edgepipe(&["verify-ops", "--cases", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(
        stdout(&o).contains("status=fail"),
        "negative control should be listed as failing"
    );
}

#[test]
fn train_writes_clean_trace_and_renders() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("run.jsonl");
    let svg = dir.path().join("run.svg");
    let trace_s = trace.to_str().unwrap();
    let o = edgepipe(&[
        "host",
        "train",
        "--model",
        &fixture("mlp.cfg"),
        "--batches",
        "2",
        "--microbatches",
        "4",
        "--split",
        "index:3",
        "--trace",
        trace_s,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = edgepipe(&["trace", "analyze", trace_s, "--check-lanes"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("lanes ok"), "{}", stdout(&o));
    let o = edgepipe(&["trace", "render", trace_s, "--out", svg.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}
