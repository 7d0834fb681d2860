//! End-to-end checks of the `agepop` binary: exit codes, stage tags and files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn agepop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agepop")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_verify_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = agepop(&["simulate", "--scenario", s(&scenario("cyclic3.toml")), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(run.join("totals.csv").exists());

    let out = agepop(&["verify", s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));
    assert!(text(&out.stdout).contains("positivity"));

    let out = agepop(&["plotdata", s(&run)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(run.join("plot/totals.dat").exists());
}

#[test]
fn infeasible_control_exits_with_the_equilibrium_tag() {
    let dir = tempfile::tempdir().unwrap();
    let src = fs::read_to_string(scenario("cyclic3.toml")).unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, src.replace("u_star_fraction = 0.5", "u_star = 50.0")).unwrap();
    let out = agepop(&["simulate", "--scenario", s(&bad), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("[equilibrium]"), "{}", text(&out.stderr));
}

#[test]
fn missing_kernel_exits_with_the_validate_tag_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let src = fs::read_to_string(scenario("cyclic3.toml")).unwrap();
    let bad = dir.path().join("bad.toml");
    let line = src.lines().find(|l| l.trim_start().starts_with("fertility")).unwrap();
    fs::write(&bad, src.replacen(&format!("{line}\n"), "", 1)).unwrap();
    let out = agepop(&["simulate", "--scenario", s(&bad), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("[validate]") && err.contains("species[1].fertility"), "{err}");
}

#[test]
fn unreadable_scenario_exits_with_the_load_tag() {
    let out = agepop(&["equilibrium", "--scenario", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("[load]"));
}

#[test]
fn empty_sweep_writes_a_header_only_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = agepop(&[
        "sweep", "--scenario", s(&scenario("cyclic3.toml")), "--param", "theta", "--values", "", "--out", s(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1);
}

#[test]
fn sweep_honours_the_worker_variable() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = Command::new(env!("CARGO_BIN_EXE_agepop"))
        .env("AGEPOP_WORKERS", "2")
        .args([
            "sweep", "--scenario", s(&scenario("linear_demographic.toml")), "--param", "horizon", "--values",
            "0.5,1", "--out", s(&csv),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let table = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("horizon,0.5,"));
    assert!(lines[2].starts_with("horizon,1,"));
}

#[test]
fn equilibrium_prints_json_and_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = agepop(&["equilibrium", "--scenario", s(&scenario("cyclic3.toml")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(value.is_object());
    assert!(dir.path().join("equilibrium.csv").exists());
}

#[test]
fn synthesize_control_writes_a_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = agepop(&["synthesize-control", "--scenario", s(&scenario("cyclic3.toml")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(dir.path().join("trajectory.csv").exists());
    assert!(dir.path().join("control.json").exists());
}

#[test]
fn mosquito_command_switches_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = agepop(&["mosquito", "--scenario", s(&scenario("mosquito_bio.toml")), "--strategy", "none", "--out", s(&run)]);
    assert!(matches!(out.status.code(), Some(0) | Some(1)), "{}", text(&out.stderr));
    let written = fs::read_to_string(run.join("scenario.toml")).unwrap();
    assert!(written.contains("strategy = \"none\""), "{written}");
}

#[test]
fn mosquito_command_rejects_other_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let out = agepop(&[
        "mosquito", "--scenario", s(&scenario("cyclic3.toml")), "--strategy", "bio", "--out", s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("[validate]"));
}

#[test]
fn plotdata_on_a_missing_run_fails_with_the_plot_tag() {
    let dir = tempfile::tempdir().unwrap();
    let out = agepop(&["plotdata", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("[plot]"));
}
