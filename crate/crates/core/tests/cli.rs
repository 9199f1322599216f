use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedul-lab"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

const SMALL: &str = r#"{
    "task": {"kind": "gaussian", "classes": 3, "dim": 2, "separation": 2.0},
    "clients": 2, "sets": [3, 4], "set_size": 30, "rounds": 3, "test_size": 100,
    "hidden": [4], "seeds": [1, 2], "methods": ["fedul", "fedllp"]
}"#;

#[test]
fn validate_reports_grid_size() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    let out = lab(&["validate", "c.json"], dir.path());
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "ok: 4 grid entries x 2 seeds\n");
}

#[test]
fn invalid_config_gives_one_json_error_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"task": {"kind": "gaussian", "classes": 3, "dim": 2, "separation": 1.0}, "seeds": [1, 1]}"#).unwrap();
    let out = lab(&["validate", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    let err: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(err["error"], "config");
    assert_eq!(err["pointer"], "/seeds/1");
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMALL).unwrap();
    let out = lab(&["run", "c.json", "--out", "res", "--workers", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let res = dir.path().join("res");
    for f in ["metrics.csv", "summary.json", "summary.txt"] {
        assert!(res.join(f).is_file(), "missing {f}");
    }
    assert!(res.join("runs/fedul-M3/seed-1.jsonl").is_file());
    let csv = std::fs::read_to_string(res.join("metrics.csv")).unwrap();
    // header + 4 entries x 2 seeds x (rounds + 1)
    assert_eq!(csv.lines().count(), 1 + 4 * 2 * 4);
}

#[test]
fn oracle_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = lab(&["oracle", "--seed", "4"], dir.path());
    assert!(out.status.success());
    assert!(!String::from_utf8(out.stdout).unwrap().contains("FAIL"));
}
