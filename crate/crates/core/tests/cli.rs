//! The `ffinit` binary: subcommands, config files and exit codes.

use std::fs;
use std::process::{Command, Output};

fn ffinit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffinit")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_then_init_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = ffinit(&["simulate", "--out", data.to_str().unwrap(), "--seed", "2", "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("cloud/frame_004.csv").is_file());
    let o = ffinit(&["init", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--log"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("result        success"));
    for f in ["run.json", "metrics.csv", "states.json", "lm_log.csv"] {
        assert!(run.join(f).is_file(), "{f}");
    }
}

#[test]
fn config_errors_name_stage_and_category() {
    let o = ffinit(&["init", "--keyframes", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("config stage failed [Obs.]") && e.contains("3 keyframes"), "{e}");

    let o = ffinit(&["init", "--ransac-iterations", "0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("[Lin.]"));
}

#[test]
fn stage_failures_exit_with_their_category() {
    let o = ffinit(&["init", "--seed", "1", "--ate-threshold", "1e-9"]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
    assert!(stderr(&o).contains("evaluation stage failed [ATE]"), "{}", stderr(&o));
    let dir = tempfile::tempdir().unwrap();
    let o = ffinit(&["init", "--data", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("input stage failed [Obs.]"));
}

#[test]
fn toml_and_json_configs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let toml = dir.path().join("c.toml");
    let json = dir.path().join("c.json");
    fs::write(&toml, "[run]\nsamples = 40\nvariant = \"ff\"\n\n[run.regions]\nrows = 1\ncols = 1\n\n[simulation]\nnum_features = 60\n").unwrap();
    fs::write(&json, r#"{"run": {"samples": 40, "variant": "ff", "regions": {"rows": 1, "cols": 1}}, "simulation": {"num_features": 60}}"#).unwrap();
    let a = ffinit(&["--config", toml.to_str().unwrap(), "init", "--seed", "3"]);
    let b = ffinit(&["init", "--seed", "3", "--config", json.to_str().unwrap()]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    fs::write(&toml, "[run\n").unwrap();
    let c = ffinit(&["--config", toml.to_str().unwrap(), "init"]);
    assert_eq!(c.status.code(), Some(1));
    assert!(stderr(&c).contains("config stage failed [uncategorized]"));
}

#[test]
fn ablate_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ablation.csv");
    let o = ffinit(&["ablate", "--axis", "regions", "--values", "1x1,3x3", "--seeds", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("regions,1x1,2,"));
    let o = ffinit(&["ablate", "--axis", "ransac", "--values", "maybe"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn self_checks() {
    let o = ffinit(&["check-rank", "--frames", "3", "--points", "2", "--trials", "20", "--noise", "0.01"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("rank 7: 20"), "{}", stdout(&o));
    let o = ffinit(&["check-rank", "--frames", "2", "--trials", "10"]);
    assert!(stdout(&o).contains("rank 3: 10"), "{}", stdout(&o));
    let o = ffinit(&["check-jacobians", "--states", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 3);
    let o = ffinit(&["bench", "--windows", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("2 windows, 2 successes"));
}
