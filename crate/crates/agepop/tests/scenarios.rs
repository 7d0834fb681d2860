//! Reference scenarios as fixtures: loading, round trips, end-to-end runs,
//! sweeps, re-verification and plot data.

use std::fs;
use std::path::{Path, PathBuf};

use agepop::pipeline::{
    emit_plotdata, equilibrium_report, execute, run_scenario, sweep, synthesize_control, verify_run_dir, write_run,
    write_sweep, write_synthesis, Stage, SweepAxis, Table,
};
use agepop::scenario::{load_scenario, parse_scenario, save_scenario, ModelKind, Scenario};
use agepop::verification::Status;
use agepop::Error;

const REFERENCES: [&str; 5] =
    ["cyclic3.toml", "linear_demographic.toml", "general_network.toml", "mosquito_bio.toml", "mosquito_genetic.toml"];

fn path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn reference(name: &str) -> Scenario {
    load_scenario(&path(name)).unwrap()
}

#[test]
fn every_reference_scenario_loads_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut kinds = Vec::new();
    for name in REFERENCES {
        let sc = reference(name);
        let copy = dir.path().join(name);
        save_scenario(&sc, &copy).unwrap();
        let again = load_scenario(&copy).unwrap();
        assert_eq!(sc, again, "{name}");
        assert_eq!(sc.config_hash().unwrap(), again.config_hash().unwrap());
        kinds.push(sc.kind);
    }
    for kind in [
        ModelKind::Cyclic,
        ModelKind::LinearDemographic,
        ModelKind::GeneralNetwork,
        ModelKind::MosquitoBio,
        ModelKind::MosquitoGenetic,
    ] {
        assert!(kinds.contains(&kind), "no reference scenario for {kind}");
    }
}

#[test]
fn validation_lists_every_problem() {
    let text = fs::read_to_string(path("cyclic3.toml")).unwrap();
    let broken = text
        .replacen("fertility = { form = \"window\", lo = 1.0, hi = 4.0, height = 2.5 }\n", "", 1)
        .replace("cells = 200", "cells = 0");
    match parse_scenario(&broken) {
        Err(Error::Validation(errors)) => {
            assert!(errors.iter().any(|e| e.contains("species[2].fertility")), "{errors:?}");
            assert!(errors.iter().any(|e| e.contains("grid.cells")), "{errors:?}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn cyclic_reference_passes_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let sc = reference("cyclic3.toml");
    let summary = run_scenario(&sc, Some(dir.path())).unwrap();
    assert!(summary.passed, "{:?}", summary.reports);
    assert_eq!(summary.converged, Some(true));
    for file in ["totals.csv", "equilibrium.csv", "certificate.json", "manifest.json", "scenario.toml", "profiles/index.csv"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], sc.config_hash().unwrap());
    assert_eq!(manifest["seed"], sc.seed);
    let totals = Table::read(&dir.path().join("totals.csv")).unwrap();
    assert_eq!(totals.header, ["t", "total_1", "total_2", "total_3", "u", "V"]);
    assert_eq!(totals.rows.len(), 601);
}

#[test]
fn infeasible_control_fails_at_the_equilibrium_stage() {
    let mut sc = reference("cyclic3.toml");
    sc.set_parameter("u_star", 5.0).unwrap();
    let e = run_scenario(&sc, None).unwrap_err();
    assert_eq!(e.stage, Stage::Equilibrium);
    assert!(e.is_infeasible());
    assert!(e.to_string().starts_with("[equilibrium]"));
}

#[test]
fn mosquito_certificate_reports_lyapunov_monotonicity() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = reference("mosquito_bio.toml");
    sc.horizon = 20.0;
    run_scenario(&sc, Some(dir.path())).unwrap();
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["lyapunov_monotone"], true);
    assert!(cert["stability_condition_fraction"].is_number());
    assert!(dir.path().join("diagnostics.csv").exists());
    assert!(dir.path().join("twin_totals.csv").exists());
}

#[test]
fn theta_sweep_converges_in_every_cell() {
    let sc = reference("cyclic3.toml");
    let rows = sweep(&sc, &[SweepAxis { parameter: "theta".into(), values: vec![0.5, 1.0, 2.0] }], Some(3)).unwrap();
    assert_eq!(rows.len(), 3);
    for (row, theta) in rows.iter().zip([0.5, 1.0, 2.0]) {
        assert_eq!(row.parameters, vec![("theta".to_string(), theta)]);
        assert_eq!(row.status, "ok");
        assert_eq!(row.converged, Some(true));
        assert!(row.time_to_tolerance.is_some());
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    write_sweep(&rows, 1, &out).unwrap();
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("parameter,value,status,converged,time_to_tolerance,max_u,min_vdot_margin,message\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn control_sweep_past_the_growth_bound_flags_infeasible_cells() {
    let mut sc = reference("mosquito_bio.toml");
    sc.horizon = 5.0;
    let rows = sweep(&sc, &[SweepAxis { parameter: "p_star".into(), values: vec![0.3, 5.0] }], Some(2)).unwrap();
    // A short horizon may leave the first cell short of convergence, but it is feasible.
    assert!(rows[0].status == "ok" || rows[0].status == "failed-checks", "{:?}", rows[0]);
    assert_eq!(rows[1].status, "infeasible");
    assert!(rows[1].message.contains("[equilibrium]"));
}

#[test]
fn empty_sweep_gives_an_empty_table() {
    let sc = reference("cyclic3.toml");
    let rows = sweep(&sc, &[SweepAxis { parameter: "theta".into(), values: vec![] }], None).unwrap();
    assert!(rows.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.csv");
    write_sweep(&rows, 1, &out).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1);
}

#[test]
fn unknown_sweep_parameter_is_recorded_per_cell() {
    let sc = reference("cyclic3.toml");
    let rows = sweep(&sc, &[SweepAxis { parameter: "bogus".into(), values: vec![1.0] }], Some(1)).unwrap();
    assert_eq!(rows[0].status, "error");
    assert!(rows[0].message.contains("unknown sweep parameter"));
}

#[test]
fn verify_rederives_checks_and_catches_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let sc = reference("linear_demographic.toml");
    run_scenario(&sc, Some(dir.path())).unwrap();
    let reports = verify_run_dir(dir.path()).unwrap();
    assert!(reports.iter().all(|r| r.status != Status::Fail), "{reports:?}");

    let profile = dir.path().join("profiles/profile_00001.csv");
    let text = fs::read_to_string(&profile).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let cells: Vec<&str> = lines[3].split(',').collect();
    lines[3] = format!("{},-0.5", cells[0]);
    fs::write(&profile, lines.join("\n") + "\n").unwrap();
    let reports = verify_run_dir(dir.path()).unwrap();
    let positivity = reports.iter().find(|r| r.name == "positivity").unwrap();
    assert_eq!(positivity.status, Status::Fail);
    assert!((positivity.residual - 0.5).abs() < 1e-12);
}

#[test]
fn verify_without_artifacts_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = verify_run_dir(dir.path()).unwrap_err();
    assert_eq!(e.stage, Stage::Verify);
}

#[test]
fn plotdata_pairs_controlled_and_uncontrolled_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = reference("mosquito_bio.toml");
    sc.horizon = 20.0;
    let result = execute(&sc).unwrap();
    write_run(&sc, &result, dir.path()).unwrap();
    let files = emit_plotdata(dir.path()).unwrap();
    let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for expected in ["totals.dat", "controlled.dat", "uncontrolled.dat", "heatmap_aquatic.dat"] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
    }
    for f in &files {
        assert!(fs::read_to_string(f).unwrap().starts_with("# "), "{} lacks a header", f.display());
    }
    let controlled = fs::read_to_string(dir.path().join("plot/controlled.dat")).unwrap();
    let uncontrolled = fs::read_to_string(dir.path().join("plot/uncontrolled.dat")).unwrap();
    assert_eq!(controlled.lines().count(), uncontrolled.lines().count());
    // One block per snapshot in the heat map.
    let heat = fs::read_to_string(dir.path().join("plot/heatmap_aquatic.dat")).unwrap();
    let blocks = heat.split("\n\n").filter(|b| !b.trim().is_empty()).count();
    assert_eq!(blocks, result.output.snapshots.len());
}

#[test]
fn snapshot_count_follows_the_stride() {
    for (stride, expected) in [(100usize, 7usize), (250, 3), (0, 0)] {
        let mut sc = reference("cyclic3.toml");
        sc.output.snapshot_stride = stride;
        let result = execute(&sc).unwrap();
        assert_eq!(result.output.snapshots.len(), expected, "stride {stride}");
    }
}

#[test]
fn plotdata_without_a_run_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(emit_plotdata(dir.path()).unwrap_err().stage, Stage::Plot);
}

#[test]
fn synthesis_writes_the_documented_trajectory_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = reference("cyclic3.toml");
    sc.horizon = 5.0;
    let s = synthesize_control(&sc).unwrap();
    write_synthesis(&s, dir.path()).unwrap();
    let table = Table::read(&dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(
        table.header,
        ["t", "eta_1", "eta_2", "eta_3", "z_1", "z_2", "u", "V", "Vdot_analytic", "Vdot_numeric", "zlast_sign"]
    );
    assert_eq!(s.config.gains.len(), 2);
    assert!(dir.path().join("control.json").exists());
    let reports = verify_run_dir(dir.path()).unwrap();
    assert!(reports.iter().any(|r| r.name == "reduced_lyapunov_monotone"));
}

#[test]
fn synthesis_needs_a_cyclic_scenario() {
    let e = synthesize_control(&reference("linear_demographic.toml")).unwrap_err();
    assert_eq!(e.stage, Stage::Synthesis);
}

#[test]
fn equilibrium_reports_for_every_kind() {
    for name in REFERENCES {
        let (value, profiles) = equilibrium_report(&reference(name)).unwrap();
        assert!(value.is_object(), "{name}");
        if let Some((names, rows)) = profiles {
            assert_eq!(names.len(), rows.len());
        }
    }
    let (value, _) = equilibrium_report(&reference("cyclic3.toml")).unwrap();
    assert!(value["coupling_residual"].as_f64().unwrap() < 1e-8);
}

#[test]
fn random_equilibrium_start_is_seeded() {
    let mut sc = reference("cyclic3.toml");
    sc.initial = agepop::scenario::InitialCondition::RandomEquilibrium { radius: 0.1 };
    let a = sc.initial_eta();
    assert_eq!(a, sc.initial_eta());
    assert!(a.iter().all(|x| x.abs() <= 0.1));
    sc.seed += 1;
    assert_ne!(a, sc.initial_eta());
}
