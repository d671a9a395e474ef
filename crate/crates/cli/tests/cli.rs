use std::process::Command;

fn qroute(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qroute")).args(args).output().unwrap()
}

#[test]
fn tables_lists_planners() {
    let out = qroute(&["tables"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[100]"));
    assert!(text.contains("learned, ger, mger, lber, nonlber, qpath, qleap"));
}

#[test]
fn overhead_prints_link_load() {
    let out = qroute(&["overhead", "--pairs", "3"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("256 B"));
    assert!(text.contains("1228.8 kbps"));
}

#[test]
fn run_writes_report_and_honours_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"planner": "lber", "repeaters": 10, "episodes": 2, "steps": 50}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = qroute(&["run", "--config", cfg.to_str().unwrap(), "--steps", "80", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["planner"], "lber");
    assert_eq!(report["episodes"], 2);
    let raw = std::fs::read_to_string(out_dir.join("raw.csv")).unwrap();
    // Header plus warm-up and measured rows per episode.
    assert_eq!(raw.lines().count(), 1 + 2 * (10 + 80));
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(qroute(&["run", "--planner", "learned"]).status.code(), Some(2));
    assert_eq!(qroute(&["run", "--planner", "nope"]).status.code(), Some(2));
    assert_eq!(qroute(&["run", "--episodes", "0", "--planner", "ger"]).status.code(), Some(2));
    assert_eq!(qroute(&["sweep", "--grid", "/definitely/missing.json"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out_dir = blocker.join("sub");
    let out = qroute(&["run", "--planner", "ger", "--repeaters", "10", "--episodes", "1", "--steps", "5", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}
