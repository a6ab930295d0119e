use std::fs;
use std::process::Command;

fn lab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_inversion-lab"))
}

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "experiment = \"theorem1\"\nsteps = 5\n").unwrap();
    let out = dir.path().join("out");
    let status = lab()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8(status.stdout).unwrap();
    assert!(stdout.contains("[PASS] M_C(1) > M_C(0)"), "{stdout}");
    for f in ["trace.csv", "summary.json", "plots.svg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p2");
    let status = lab()
        .args(["run", "--experiment", "prop2", "--steps", "2", "--seed", "3", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0));
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"experiment\": \"prop2\""));
    assert!(summary.contains("\"seed\": 3"));
}

#[test]
fn malformed_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [
        ("syntax.toml", "steps = = 3"),
        ("unknown.toml", "stepz = 3"),
        ("constraint.toml", "delta_c = 0.01"),
    ] {
        let cfg = dir.path().join(name);
        fs::write(&cfg, body).unwrap();
        let out = lab().args(["run", "--config"]).arg(&cfg).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{name}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{name}");
    }
    let missing = lab().args(["run", "--config", "/nonexistent/cfg.toml"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn violated_property_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let status = lab()
        .args(["run", "--experiment", "trajectory", "--steps", "10", "--eta", "1e-6", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&status.stdout).contains("[FAIL] M_C rises then falls"));
}

#[test]
fn verify_prints_a_passing_table() {
    let out = lab().arg("verify").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.lines().count() >= 15);
    assert!(table.lines().all(|l| l.starts_with("PASS")), "{table}");
}

#[test]
fn sweep_requires_values() {
    let dir = tempfile::tempdir().unwrap();
    let empty = lab()
        .args(["sweep", "--param", "n_cs", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(empty.status.code(), Some(2));
    let ok = lab()
        .args(["sweep", "--param", "seed", "--values", "0,1", "--experiment", "theorem1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("aggregate.csv").is_file());
    assert!(dir.path().join("seed=1").join("trace.csv").is_file());
}
