use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mcran() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mcran"));
    c.env_remove("MCRAN_OUT_DIR");
    c
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"
name = "small"
duration_ms = 300
seed = 5

[[cells]]
id = 0
position = [0.0, 0.0, 25.0]
capacity_prbs = 50

[[ue_groups]]
name = "team"
class = "mission-critical"
count = 4
cell = 0
services = ["mcptt-voice"]
placement = { radius_m = 50.0 }
"#;

#[test]
fn validate_accepts_shipped_scenarios() {
    for entry in fs::read_dir(scenarios()).unwrap() {
        let path = entry.unwrap().path();
        let o = mcran()
            .args(["validate", "--scenario"])
            .arg(&path)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}: {}", path.display(), stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains(": ok ("));
    }
}

#[test]
fn validate_names_the_offending_entry() {
    let dir = tempfile::tempdir().unwrap();
    let bad_cell = write(dir.path(), "a.toml", &SMALL.replace("cell = 0", "cell = 9"));
    let o = mcran()
        .args(["validate", "--scenario"])
        .arg(&bad_cell)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ue_groups[team]"), "{}", stderr(&o));
    assert!(stderr(&o).contains("unknown cell 9"), "{}", stderr(&o));

    let bad_factor = format!(
        "{SMALL}\n[[uac.categories]]\ncategory = 7\nbarring_factor = 1.3\nbarring_time_ms = 100\n"
    );
    let bad_factor = write(dir.path(), "b.toml", &bad_factor);
    let o = mcran()
        .args(["validate", "--scenario"])
        .arg(&bad_factor)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("1.3"), "{}", stderr(&o));

    let o = mcran()
        .args(["validate", "--scenario", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_writes_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write(dir.path(), "small.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mcran()
            .args(["run", "--scenario"])
            .arg(&scn)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("small seed=5 "));
    }
    let ra = fs::read(a.join("small-seed5.json")).unwrap();
    assert_eq!(ra, fs::read(b.join("small-seed5.json")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["access"]["mc"]["ues"], 4);
}

#[test]
fn trace_replays_to_the_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = mcran()
        .args(["run", "--trace", "--seed", "3", "--scenario"])
        .arg(scenarios().join("group-comms.toml"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read(out.join("group-comms-seed3.json")).unwrap();

    let o = mcran()
        .args(["replay", "--trace"])
        .arg(out.join("group-comms-seed3.trace.csv"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(o.stdout, report);

    let replayed = dir.path().join("replayed.json");
    let o = mcran()
        .args(["replay", "--trace"])
        .arg(out.join("group-comms-seed3.trace.csv"))
        .arg("--out")
        .arg(&replayed)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(replayed).unwrap(), report);
}

#[test]
fn corrupt_trace_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = write(
        dir.path(),
        "t.csv",
        "seq,time_us,kind,payload\n0,0,no-such-kind,{}\n",
    );
    let o = mcran()
        .args(["replay", "--trace"])
        .arg(&t)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seeds_fan_out_and_env_sets_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let scn = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("env-out");
    let o = mcran()
        .env("MCRAN_OUT_DIR", &out)
        .args(["run", "--seeds", "1,2,2,3", "--scenario"])
        .arg(&scn)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(stdout.lines().count(), 3);
    for seed in [1, 2, 3] {
        assert!(out.join(format!("small-seed{seed}.json")).is_file());
    }
}

#[test]
fn position_demo_emits_fixes_and_cdf() {
    let dir = tempfile::tempdir().unwrap();
    let o = mcran()
        .args(["position-demo", "--draws", "5", "--scenario"])
        .arg(scenarios().join("burning-building-positioning.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let fixes =
        fs::read_to_string(dir.path().join("burning-building-positioning-fixes.csv")).unwrap();
    let mut lines = fixes.lines();
    assert_eq!(
        lines.next(),
        Some("geometry,draw,target,ok,horizontal_error_m,vertical_error_m,x,y,z")
    );
    // Five draws for each of the three geometries.
    assert_eq!(lines.count(), 3 * 5);
    let cdf = fs::read_to_string(dir.path().join("burning-building-positioning-cdf.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&o.stdout), cdf);
    assert!(cdf.lines().any(|l| l.starts_with("improved,67,")));

    let plain = write(dir.path(), "small.toml", SMALL);
    let o = mcran()
        .args(["position-demo", "--scenario"])
        .arg(&plain)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
