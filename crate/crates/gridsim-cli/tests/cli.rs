use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gridsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridsim")).args(args).output().expect("spawn gridsim")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(
        &p,
        r#"{"name":"bad","seed":1,"horizon":0,"lookahead":5,"model":{"type":"ping_pong","rounds":0,"delay":1}}"#,
    )
    .unwrap();
    let out = gridsim(&["validate", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("horizon"), "{err}");
    assert!(err.contains("rounds"), "{err}");
    assert!(err.contains("delay"), "{err}");

    let out = gridsim(&["validate", s(&scenario("t0t1.json"))]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn run_then_export_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = gridsim(&["run", s(&scenario("pingpong.json")), "--local", "2", "--quiet", "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("finished:"));
    let out = gridsim(&["export", s(&a), "--out", s(&b)]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["records.csv", "trace.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    // A tampered export is refused.
    let mut rec = std::fs::read_to_string(b.join("records.csv")).unwrap();
    rec.push_str("garbage\n");
    std::fs::write(b.join("records.csv"), rec).unwrap();
    let out = gridsim(&["export", s(&b), "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn deadlock_exits_4_with_json_diagnostic() {
    let out = gridsim(&["run", s(&scenario("deadlock.json")), "--local", "2", "--quiet", "--deadlock-timeout", "0.5"]);
    assert_eq!(out.status.code(), Some(4));
    let diag: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(diag["status"], "deadlock");
    assert_eq!(diag["virtual_time"], 0);
    assert!(diag["agent"].is_u64());
}

#[test]
fn previous_run_seeds_initial_placements() {
    let dir = tempfile::tempdir().unwrap();
    let run1 = dir.path().join("run1");
    let out = gridsim(&["run", s(&scenario("regional.json")), "--local", "2", "--quiet", "--out", s(&run1)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(scenario("regional.json")).unwrap()).unwrap();
    v["model"]["initial_placements"] = serde_json::json!([]);
    v["model"]["initial_placements_from"] = serde_json::json!("run1");
    let p = dir.path().join("seeded.json");
    std::fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
    let run2 = dir.path().join("run2");
    let out = gridsim(&["run", s(&p), "--local", "1", "--quiet", "--out", s(&run2)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let pool1 = gridsim::results::ResultPool::import(&run1).unwrap();
    let final1 = gridsim::scenario::placements_from_pool(&pool1);
    assert!(!final1.is_empty());

    // Same placements written inline give the same results.
    v["model"]["initial_placements"] = serde_json::to_value(&final1).unwrap();
    v["model"].as_object_mut().unwrap().remove("initial_placements_from");
    let p = dir.path().join("inline.json");
    std::fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
    let run3 = dir.path().join("run3");
    let out = gridsim(&["run", s(&p), "--local", "1", "--quiet", "--out", s(&run3)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(run2.join("records.csv")).unwrap(), std::fs::read(run3.join("records.csv")).unwrap());
}
