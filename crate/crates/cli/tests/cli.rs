use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
version = 1

[world]
name = "small"

[robots]
kind = "explicit"
positions = [{ x = 15.0, y = 15.0 }, { x = 18.0, y = 16.0 }, { x = 16.0, y = 18.0 }]

[[obstacles]]
center = { x = 30.0, y = 30.0 }
size = 4.0

[[threats]]
position = { x = 10.0, y = 10.0 }

[run]
max_ticks = 200
n_runs = 3
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neuroswarm"));
    c.env_remove("NEUROSWARM_OUT");
    c
}

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("s.toml");
    fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_scenario(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = bin()
        .args(["run", s.to_str().unwrap(), "--svg", "--dump-activity", "0,3", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trajectory.csv", "metrics.json", "events.csv", "run.svg", "activity_t0.txt", "activity_t3.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("tick,robot,x,y,mode,hier,v,alpha_A,gamma_min\n"));
    let matrix = fs::read_to_string(out.join("activity_t3.txt")).unwrap();
    assert_eq!(matrix.lines().count(), 70);
    assert!(stdout(&o).starts_with("success"));
}

#[test]
fn out_dir_defaults_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_scenario(dir.path(), SMALL);
    let out = dir.path().join("from_env");
    let o = bin()
        .args(["run", s.to_str().unwrap()])
        .env("NEUROSWARM_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("metrics.json").is_file());
}

#[test]
fn seed_flag_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_scenario(dir.path(), SMALL);
    let read = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let o = bin()
            .args(["--seed", "9", "--workers", workers, "run", s.to_str().unwrap(), "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        fs::read(out.join("trajectory.csv")).unwrap()
    };
    assert_eq!(read("a", "1"), read("b", "4"));
}

#[test]
fn batch_and_sweep_report() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_scenario(dir.path(), SMALL);
    let json = dir.path().join("b.json");
    let o = bin()
        .args(["batch", s.to_str().unwrap(), "--runs", "2", "--adaptation", "fixed_ratio", "--json"])
        .arg(&json)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("fixed_ratio"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert_eq!(report["runs"][1]["seed"].as_u64(), report["runs"][0]["seed"].as_u64().map(|s| s + 1));

    let o = bin()
        .args(["sweep", s.to_str().unwrap(), "--param", "A", "--values", "5,15", "--runs", "2"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("A=5") && text.contains("A=15"), "{text}");
}

#[test]
fn usage_errors_exit_64() {
    let o = bin().args(["run", "x.toml", "--bogus"]).output().unwrap();
    assert_eq!(o.status.code(), Some(64));
    let o = bin().output().unwrap();
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn scenario_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_scenario(dir.path(), "");
    let o = bin().args(["run", s.to_str().unwrap()]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("version") && err.contains("robots"), "{err}");

    let o = bin()
        .args(["sweep", s.to_str().unwrap(), "--param", "A", "--values", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));

    let s = write_scenario(dir.path(), SMALL);
    let o = bin()
        .args(["sweep", s.to_str().unwrap(), "--param", "nope", "--values", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn timeout_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_scenario(dir.path(), &SMALL.replace("max_ticks = 200", "max_ticks = 3"));
    let o = bin()
        .args(["run", s.to_str().unwrap(), "--out"])
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_74() {
    let dir = tempfile::tempdir().unwrap();
    let s = write_scenario(dir.path(), SMALL);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = bin()
        .args(["run", s.to_str().unwrap(), "--out"])
        .arg(blocker.join("sub"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(74));
}
