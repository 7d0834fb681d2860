//! Run orchestration: steady state, controller synthesis, simulation,
//! property checks and output files, plus sweeps, re-verification of run
//! directories and plot-data emission.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backstepping::{
    closed_loop_reduced, feasible_level_estimate, BacksteppingController, ClosedLoopOptions, ControllerConfig,
    ReducedSystem, ReducedTrajectory, ShapeMode,
};
use crate::equilibrium::{build_equilibrium, coupling_residual, solve_zeta, stability_report, Equilibrium};
use crate::error::Error;
use crate::grid::{net_reproduction, AgeGrid};
use crate::mosquito::{
    mosquito_equilibrium, oscillation_amplitude, run_strategy, stability_condition_at, MosquitoDiagnostics,
    MosquitoEquilibrium, Strategy, StrategyOptions,
};
use crate::scenario::{ModelKind, Scenario, SCHEMA_VERSION};
use crate::transport::{simulate, ConstantControl, Controller, LinearModel, NetworkModel, SimOutput};
use crate::verification::{
    check_lyapunov_monotone, check_positivity, check_positivity_samples, Location, PropertyReport, Status, Tolerances,
};

/// Pipeline stage at which a failure happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Validate,
    Equilibrium,
    Synthesis,
    Simulate,
    Verify,
    Write,
    Plot,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Load => "load",
            Stage::Validate => "validate",
            Stage::Equilibrium => "equilibrium",
            Stage::Synthesis => "synthesis",
            Stage::Simulate => "simulate",
            Stage::Verify => "verify",
            Stage::Write => "write",
            Stage::Plot => "plot",
        })
    }
}

/// A failure tagged with the stage that produced it.
#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {source}")]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl StageError {
    pub fn new(stage: Stage, source: Error) -> Self {
        Self { stage, source }
    }

    /// True when the failure means that no steady state exists.
    pub fn is_infeasible(&self) -> bool {
        matches!(self.source, Error::Infeasible(_))
    }
}

fn at(stage: Stage) -> impl FnOnce(Error) -> StageError {
    move |source| StageError { stage, source }
}

/// Result type of the pipeline.
pub type StageResult<T> = std::result::Result<T, StageError>;

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub kind: ModelKind,
    /// Final distance to the steady state within the convergence tolerance
    /// (`None` when the model has no target state).
    pub converged: Option<bool>,
    /// First recorded time after which the totals stay within the
    /// convergence tolerance of their steady-state values.
    pub time_to_tolerance: Option<f64>,
    pub max_u: f64,
    /// `slack - max_k ΔV_k / dt²`: distance of the worst Lyapunov step to the
    /// monotonicity limit, in units of `dt²` (positive means monotone).
    pub min_vdot_margin: Option<f64>,
    /// Relative L¹ distance of the final profiles to the steady state.
    pub final_relative_error: Option<f64>,
    pub reports: Vec<PropertyReport>,
    /// No report failed.
    pub passed: bool,
}

/// Mosquito-specific results.
#[derive(Debug, Clone, PartialEq)]
pub struct MosquitoArtifacts {
    pub equilibrium: Option<MosquitoEquilibrium>,
    pub diagnostics: MosquitoDiagnostics,
    pub certificate: crate::mosquito::Certificate,
    /// Same initial state without intervention.
    pub twin: Option<SimOutput>,
    pub controlled_amplitude: f64,
    pub twin_amplitude: Option<f64>,
}

/// Everything a run produces before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub grid: AgeGrid,
    pub summary: RunSummary,
    pub output: SimOutput,
    /// Steady-state profiles, one per compartment.
    pub steady_profiles: Option<Vec<Vec<f64>>>,
    pub mosquito: Option<MosquitoArtifacts>,
    pub certificate: serde_json::Value,
}

fn relative_profile_error(grid: &AgeGrid, state: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in state.iter().zip(target) {
        let diff: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - b).abs()).collect();
        num += grid.trapezoid(&diff);
        den += grid.trapezoid(y);
    }
    num / den
}

/// First time after which `distance` stays at or below `tol`.
fn settle_time(times: &[f64], distance: &[f64], tol: f64) -> Option<f64> {
    let mut settle = None;
    for (t, d) in times.iter().zip(distance) {
        if *d <= tol {
            settle.get_or_insert(*t);
        } else {
            settle = None;
        }
    }
    settle
}

fn lyapunov_margin(times: &[f64], values: &[f64], slack: f64) -> Option<f64> {
    let report = check_lyapunov_monotone(times, values, slack);
    (values.iter().any(|v| v.is_finite()) && report.residual.is_finite()).then_some(slack - report.residual)
}

fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

/// Growth-exponent based equilibrium control of a cyclic scenario.
fn resolve_u_star(sc: &Scenario) -> crate::error::Result<f64> {
    let c = sc.controller.as_ref().ok_or_else(|| Error::Config("missing section: controller".into()))?;
    match (c.u_star, c.u_star_fraction) {
        (Some(u), _) => Ok(u),
        (None, Some(f)) => {
            let species = sc.build_species()?;
            Ok(f * solve_zeta(&species[0].fertility, &species[0].mortality)?)
        }
        (None, None) => Err(Error::Config("controller needs u_star or u_star_fraction".into())),
    }
}

fn controller_config(sc: &Scenario, eq: &Equilibrium) -> crate::error::Result<ControllerConfig> {
    let section = sc.controller.clone().unwrap_or_default();
    let mut cfg = ControllerConfig::from_equilibrium(eq, section.theta, section.terminal_gain)?;
    if let Some(v) = section.u_min {
        cfg.u_min = v;
    }
    if let Some(v) = section.u_max {
        cfg.u_max = v;
    }
    if let Some(v) = section.epsilon_z {
        cfg.epsilon_z = v;
    }
    cfg.validate(&ReducedSystem::from_equilibrium(eq)?)?;
    Ok(cfg)
}

/// Cyclic steady state of a scenario.
pub fn scenario_equilibrium(sc: &Scenario) -> StageResult<Equilibrium> {
    let spec = sc.build_network().map_err(at(Stage::Validate))?;
    let u_star = resolve_u_star(sc).map_err(at(Stage::Equilibrium))?;
    build_equilibrium(&spec, u_star).map_err(at(Stage::Equilibrium))
}

/// Runs the full pipeline in memory.
pub fn execute(sc: &Scenario) -> StageResult<RunResult> {
    sc.validate().map_err(at(Stage::Validate))?;
    match sc.kind {
        ModelKind::MosquitoBio | ModelKind::MosquitoGenetic => execute_mosquito(sc),
        _ => execute_network(sc),
    }
}

fn execute_network(sc: &Scenario) -> StageResult<RunResult> {
    let grid = sc.grid().map_err(at(Stage::Validate))?;
    let tol = sc.tolerances();
    let section = sc.controller.clone().unwrap_or_default();
    let options = sc.output.options();
    let mut reports = Vec::new();
    let (output, steady) = match sc.kind {
        ModelKind::LinearDemographic => {
            let species = sc.build_species().map_err(at(Stage::Validate))?.remove(0);
            let initial = sc.initial_state(None).map_err(at(Stage::Validate))?;
            let mut control = ConstantControl(section.constant.unwrap_or(0.0));
            let out = simulate(&LinearModel { species }, &initial, sc.horizon, Some(&mut control), options)
                .map_err(at(Stage::Simulate))?;
            (out, None)
        }
        ModelKind::GeneralNetwork => {
            let spec = sc.build_network().map_err(at(Stage::Validate))?;
            let initial = sc.initial_state(None).map_err(at(Stage::Validate))?;
            let mut control = ConstantControl(section.constant.unwrap_or(0.0));
            let out = simulate(&NetworkModel { spec }, &initial, sc.horizon, Some(&mut control), options)
                .map_err(at(Stage::Simulate))?;
            (out, None)
        }
        _ => {
            let spec = sc.build_network().map_err(at(Stage::Validate))?;
            let eq = scenario_equilibrium(sc)?;
            let initial = sc.initial_state(Some(&eq)).map_err(at(Stage::Validate))?;
            let mut feedback;
            let mut open_loop;
            let controller: &mut dyn Controller = if section.feedback {
                let cfg = controller_config(sc, &eq).map_err(at(Stage::Synthesis))?;
                feedback = BacksteppingController::new(&eq, cfg).map_err(at(Stage::Synthesis))?;
                &mut feedback
            } else {
                open_loop = ConstantControl(eq.u_star);
                &mut open_loop
            };
            let out = simulate(&NetworkModel { spec }, &initial, sc.horizon, Some(controller), options)
                .map_err(at(Stage::Simulate))?;
            (out, Some(eq))
        }
    };

    let mut positivity = check_positivity(&output, &grid);
    positivity.tolerance = tol.positivity;
    reports.push(PropertyReport::decide(
        "positivity",
        positivity.residual,
        tol.positivity,
        positivity.location,
        positivity.detail,
    ));
    let has_lyapunov = output.lyapunov.iter().any(|v| v.is_finite());
    if has_lyapunov {
        reports.push(check_lyapunov_monotone(&output.times, &output.lyapunov, tol.lyapunov_slack));
    }
    let steady_profiles = steady.as_ref().map(|eq| eq.species.iter().map(|s| s.profile.clone()).collect::<Vec<_>>());
    let mut final_relative_error = None;
    let mut time_to_tolerance = None;
    let mut converged = None;
    if let (Some(eq), Some(profiles)) = (&steady, &steady_profiles) {
        let err = relative_profile_error(&grid, &output.final_state.densities, profiles);
        final_relative_error = Some(err);
        let target = eq.totals();
        let total: f64 = target.iter().sum();
        let distance: Vec<f64> = output
            .totals
            .iter()
            .map(|row| row.iter().zip(&target).map(|(x, y)| (x - y).abs()).sum::<f64>() / total)
            .collect();
        time_to_tolerance = settle_time(&output.times, &distance, sc.output.convergence_tolerance);
        let report = PropertyReport::decide(
            "convergence",
            err,
            sc.output.convergence_tolerance,
            Some(Location { t: output.final_state.t, age: None, species: None }),
            "relative L1 distance of the final profiles to the steady state".into(),
        );
        converged = Some(report.passed());
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.status != Status::Fail);
    let summary = RunSummary {
        name: sc.name.clone(),
        kind: sc.kind,
        converged,
        time_to_tolerance,
        max_u: max_of(&output.controls),
        min_vdot_margin: if has_lyapunov { lyapunov_margin(&output.times, &output.lyapunov, tol.lyapunov_slack) } else { None },
        final_relative_error,
        reports: reports.clone(),
        passed,
    };
    let lyapunov_monotone = reports.iter().find(|r| r.name == "lyapunov_monotone").map(|r| r.passed());
    let certificate = json!({
        "passed": passed,
        "lyapunov_monotone": lyapunov_monotone,
        "max_positivity_violation": (-output.min_density).max(0.0),
        "final_relative_error": final_relative_error,
        "clamp_events": output.clamp_events,
        "guard_events": output.guard_events,
        "u_star": steady.as_ref().map(|e| e.u_star),
        "reports": reports,
    });
    Ok(RunResult { grid, summary, output, steady_profiles, mosquito: None, certificate })
}

fn execute_mosquito(sc: &Scenario) -> StageResult<RunResult> {
    let grid = sc.grid().map_err(at(Stage::Validate))?;
    let tol = sc.tolerances();
    let spec = sc.build_mosquito().map_err(at(Stage::Validate))?;
    let config = sc.mosquito.clone().expect("validated mosquito section");
    let strategy = sc.strategy();
    let genetic = strategy == Strategy::Genetic;
    let eq = match mosquito_equilibrium(&spec, config.p_star) {
        Ok(eq) => Some(eq),
        Err(e) if !genetic => return Err(StageError::new(Stage::Equilibrium, e)),
        Err(_) => None,
    };
    let initial = match &eq {
        Some(e) => sc.mosquito_initial_state(e).map_err(at(Stage::Validate))?,
        None => {
            return Err(StageError::new(
                Stage::Equilibrium,
                Error::Infeasible("no mosquito steady state to build the initial state from".into()),
            ))
        }
    };
    let options = StrategyOptions {
        horizon: sc.horizon,
        p_star: config.p_star,
        initial: Some(initial.clone()),
        output: sc.output.options(),
        gamma1: config.gamma1,
    };
    let run = run_strategy(&spec, strategy, &options).map_err(at(Stage::Simulate))?;
    let twin = if config.twin && strategy != Strategy::None {
        let (twin_spec, twin_strategy) = if genetic {
            let mut s = spec.clone();
            s.releases.clear();
            (s, Strategy::Genetic)
        } else {
            (spec.clone(), Strategy::None)
        };
        Some(run_strategy(&twin_spec, twin_strategy, &options).map_err(at(Stage::Simulate))?.output)
    } else {
        None
    };
    let aquatic = |out: &SimOutput| out.totals.iter().map(|r| r[0]).collect::<Vec<f64>>();
    let from = 0.5 * sc.horizon;
    let controlled_amplitude = oscillation_amplitude(&run.output.times, &aquatic(&run.output), from);
    let twin_amplitude = twin.as_ref().map(|t| oscillation_amplitude(&t.times, &aquatic(t), from));

    let mut reports = Vec::new();
    let positivity = check_positivity(&run.output, &grid);
    reports.push(PropertyReport::decide(
        "positivity",
        positivity.residual,
        tol.positivity,
        positivity.location,
        positivity.detail,
    ));
    let biological = matches!(strategy, Strategy::Biological | Strategy::BiologicalStatic);
    let diag = &run.diagnostics;
    let mut time_to_tolerance = None;
    let mut converged = None;
    let mut min_vdot_margin = None;
    if biological {
        reports.push(check_lyapunov_monotone(&diag.times, &diag.lyapunov, tol.lyapunov_slack));
        min_vdot_margin = lyapunov_margin(&diag.times, &diag.lyapunov, tol.lyapunov_slack);
    }
    if let (Some(e), false) = (&eq, genetic) {
        let gap = run.certificate.final_relative_gap.unwrap_or(f64::NAN);
        let distance: Vec<f64> = diag.aquatic_total.iter().map(|x| (x - e.k_aquatic).abs() / e.k_aquatic).collect();
        time_to_tolerance = settle_time(&diag.times, &distance, sc.output.convergence_tolerance);
        if strategy != Strategy::None {
            let report = PropertyReport::decide(
                "convergence",
                gap,
                sc.output.convergence_tolerance,
                Some(Location { t: run.output.final_state.t, age: None, species: Some(0) }),
                "relative distance of the aquatic total to its steady value".into(),
            );
            converged = Some(report.passed());
            reports.push(report);
        }
    }
    let passed = reports.iter().all(|r| r.status != Status::Fail);
    let steady_profiles = eq.as_ref().map(|e| {
        let s = if genetic { e.genetic_state(1.0) } else { e.state() };
        s.densities
    });
    let summary = RunSummary {
        name: sc.name.clone(),
        kind: sc.kind,
        converged,
        time_to_tolerance,
        max_u: max_of(&diag.control),
        min_vdot_margin,
        final_relative_error: run.certificate.final_relative_gap,
        reports: reports.clone(),
        passed,
    };
    let mut certificate = serde_json::to_value(&run.certificate).map_err(|e| StageError::new(Stage::Verify, e.into()))?;
    if let serde_json::Value::Object(map) = &mut certificate {
        map.insert("passed".into(), json!(passed));
        map.insert("controlled_amplitude".into(), json!(controlled_amplitude));
        map.insert("twin_amplitude".into(), json!(twin_amplitude));
        map.insert("k_aquatic".into(), json!(eq.as_ref().map(|e| e.k_aquatic)));
        map.insert("reports".into(), json!(reports));
    }
    Ok(RunResult {
        grid,
        summary,
        output: run.output,
        steady_profiles,
        mosquito: Some(MosquitoArtifacts {
            equilibrium: eq,
            diagnostics: run.diagnostics,
            certificate: run.certificate,
            twin,
            controlled_amplitude,
            twin_amplitude,
        }),
        certificate,
    })
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> crate::error::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> crate::error::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn totals_header(names: &[String]) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(names.iter().map(|n| format!("total_{n}")));
    h.push("u".into());
    h.push("V".into());
    h
}

fn totals_rows(out: &SimOutput) -> Vec<Vec<String>> {
    (0..out.times.len())
        .map(|k| {
            let mut row = vec![num(out.times[k])];
            row.extend(out.totals[k].iter().map(|v| num(*v)));
            row.push(num(out.controls[k]));
            row.push(num(out.lyapunov[k]));
            row
        })
        .collect()
}

fn profile_rows(grid: &AgeGrid, profiles: &[Vec<f64>]) -> Vec<Vec<String>> {
    grid.ages()
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let mut row = vec![num(*a)];
            row.extend(profiles.iter().map(|p| num(p[j])));
            row
        })
        .collect()
}

/// Writes a run directory.
pub fn write_run(sc: &Scenario, result: &RunResult, dir: &Path) -> StageResult<Vec<PathBuf>> {
    write_run_inner(sc, result, dir).map_err(at(Stage::Write))
}

fn write_run_inner(sc: &Scenario, result: &RunResult, dir: &Path) -> crate::error::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let names = &result.output.compartment_names;
    let grid = &result.grid;

    let path = dir.join("scenario.toml");
    fs::write(&path, sc.to_toml()?)?;
    files.push(path);

    let path = dir.join("totals.csv");
    write_csv(&path, &totals_header(names), totals_rows(&result.output))?;
    files.push(path);

    if let Some(profiles) = &result.steady_profiles {
        let mut header = vec!["a".to_string()];
        header.extend(names.iter().cloned());
        let path = dir.join("equilibrium.csv");
        write_csv(&path, &header, profile_rows(grid, profiles))?;
        files.push(path);
    }

    if !result.output.snapshots.is_empty() {
        let pdir = dir.join("profiles");
        fs::create_dir_all(&pdir)?;
        let mut header = vec!["a".to_string()];
        header.extend(names.iter().cloned());
        let mut index = Vec::new();
        for (k, snap) in result.output.snapshots.iter().enumerate() {
            let file = format!("profile_{k:05}.csv");
            write_csv(&pdir.join(&file), &header, profile_rows(grid, &snap.densities))?;
            index.push(vec![k.to_string(), num(snap.t), file]);
        }
        let path = pdir.join("index.csv");
        write_csv(&path, &["index".into(), "t".into(), "file".into()], index)?;
        files.push(path);
    }

    if let Some(m) = &result.mosquito {
        let d = &m.diagnostics;
        let header: Vec<String> = [
            "t",
            "control",
            "aquatic_total",
            "recruitment",
            "mating",
            "eta",
            "lyapunov",
            "admissible",
            "stability_holds",
            "clamped",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let b = |v: Option<&bool>| v.map(|b| u8::from(*b).to_string()).unwrap_or_default();
        let rows = (0..d.times.len()).map(|k| {
            vec![
                num(d.times[k]),
                num(d.control[k]),
                num(d.aquatic_total[k]),
                num(d.recruitment[k]),
                num(d.mating[k]),
                num(d.eta[k]),
                num(d.lyapunov[k]),
                b(d.admissible.get(k)),
                b(d.stability_holds.get(k)),
                b(d.clamped.get(k)),
            ]
        });
        let path = dir.join("diagnostics.csv");
        write_csv(&path, &header, rows)?;
        files.push(path);
        if let Some(twin) = &m.twin {
            let path = dir.join("twin_totals.csv");
            write_csv(&path, &totals_header(&twin.compartment_names), totals_rows(twin))?;
            files.push(path);
        }
    }

    let path = dir.join("certificate.json");
    write_json(&path, &result.certificate)?;
    files.push(path);

    let path = dir.join("summary.json");
    write_json(&path, &serde_json::to_value(&result.summary)?)?;
    files.push(path);

    let relative: Vec<String> =
        files.iter().map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string()).collect();
    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "name": sc.name,
        "kind": sc.kind,
        "config_hash": sc.config_hash()?,
        "agepop_version": env!("CARGO_PKG_VERSION"),
        "seed": sc.seed,
        "horizon": sc.horizon,
        "max_age": grid.max_age(),
        "cells": grid.cells(),
        "step": grid.step(),
        "stride": sc.output.stride,
        "snapshot_stride": sc.output.snapshot_stride,
        "snapshots": result.output.snapshots.len(),
        "tolerances": sc.tolerances(),
        "passed": result.summary.passed,
        "files": relative,
    });
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    files.push(path);
    Ok(files)
}

/// Runs a scenario and, when `out_dir` is given, writes its run directory.
pub fn run_scenario(sc: &Scenario, out_dir: Option<&Path>) -> StageResult<RunSummary> {
    let result = execute(sc)?;
    if let Some(dir) = out_dir {
        write_run(sc, &result, dir)?;
    }
    Ok(result.summary)
}

/// Named steady profiles: compartment names and one node list per compartment.
pub type NamedProfiles = (Vec<String>, Vec<Vec<f64>>);

/// Steady-state report of a scenario, with its profiles.
pub fn equilibrium_report(sc: &Scenario) -> StageResult<(serde_json::Value, Option<NamedProfiles>)> {
    sc.validate().map_err(at(Stage::Validate))?;
    let grid = sc.grid().map_err(at(Stage::Validate))?;
    match sc.kind {
        ModelKind::Cyclic => {
            let spec = sc.build_network().map_err(at(Stage::Validate))?;
            let eq = scenario_equilibrium(sc)?;
            let stability = stability_report(&spec, &eq).map_err(at(Stage::Equilibrium))?;
            let names: Vec<String> = (1..=eq.species.len()).map(|i| format!("species_{i}")).collect();
            let value = json!({
                "kind": sc.kind,
                "u_star": eq.u_star,
                "growth_exponents": eq.zetas(),
                "interaction_intensities": eq.lambdas(),
                "newborn": eq.species.iter().map(|s| s.newborn).collect::<Vec<_>>(),
                "totals": eq.totals(),
                "coupling_residual": coupling_residual(&eq),
                "reproduction_numbers": stability.r0,
                "classification": stability.classification,
            });
            Ok((value, Some((names, eq.species.iter().map(|s| s.profile.clone()).collect()))))
        }
        ModelKind::LinearDemographic | ModelKind::GeneralNetwork => {
            let species = sc.build_species().map_err(at(Stage::Validate))?;
            let zetas = species
                .iter()
                .map(|s| solve_zeta(&s.fertility, &s.mortality))
                .collect::<crate::error::Result<Vec<_>>>()
                .map_err(at(Stage::Equilibrium))?;
            let r0: Vec<f64> = species.iter().map(net_reproduction).collect();
            let value = json!({
                "kind": sc.kind,
                "growth_exponents": zetas,
                "reproduction_numbers": r0,
            });
            Ok((value, None))
        }
        ModelKind::MosquitoBio | ModelKind::MosquitoGenetic => {
            let spec = sc.build_mosquito().map_err(at(Stage::Validate))?;
            let p_star = sc.mosquito.as_ref().map(|m| m.p_star).unwrap_or(0.0);
            let eq = mosquito_equilibrium(&spec, p_star).map_err(at(Stage::Equilibrium))?;
            let stability = stability_condition_at(&spec, 0.0).map_err(at(Stage::Equilibrium))?;
            let value = json!({
                "kind": sc.kind,
                "p_star": eq.p_star,
                "aquatic_exponent": eq.zeta_aquatic,
                "female_exponent": eq.zeta_female,
                "male_exponent": eq.zeta_male,
                "aquatic_total": eq.k_aquatic,
                "crowding_load": eq.crowding_load,
                "male_signal": eq.male_signal,
                "newborn": [eq.newborn_aquatic, eq.newborn_female, eq.newborn_male],
                "residual": eq.residual,
                "stability_condition_at_start": stability,
                "cells": grid.cells(),
            });
            Ok((value, Some((vec!["aquatic".into(), "female".into(), "male".into()], vec![eq.aquatic, eq.female, eq.male]))))
        }
    }
}

/// Writes `equilibrium.json` and `equilibrium.csv` into `dir`.
pub fn write_equilibrium(sc: &Scenario, dir: &Path) -> StageResult<serde_json::Value> {
    let (value, profiles) = equilibrium_report(sc)?;
    let grid = sc.grid().map_err(at(Stage::Validate))?;
    (|| -> crate::error::Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("equilibrium.json"), &value)?;
        if let Some((names, profiles)) = &profiles {
            let mut header = vec!["a".to_string()];
            header.extend(names.iter().cloned());
            write_csv(&dir.join("equilibrium.csv"), &header, profile_rows(&grid, profiles))?;
        }
        Ok(())
    })()
    .map_err(at(Stage::Write))?;
    Ok(value)
}

/// Reduced closed-loop synthesis result.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub config: ControllerConfig,
    pub system: ReducedSystem,
    pub trajectory: ReducedTrajectory,
    pub feasible_level: f64,
    pub reports: Vec<PropertyReport>,
    pub summary: serde_json::Value,
}

/// Builds the controller of a cyclic scenario and integrates the reduced
/// closed loop from the scenario's initial log-amplitudes.
pub fn synthesize_control(sc: &Scenario) -> StageResult<Synthesis> {
    sc.validate().map_err(at(Stage::Validate))?;
    if sc.kind != ModelKind::Cyclic {
        return Err(StageError::new(
            Stage::Synthesis,
            Error::Config(format!("controller synthesis needs a cyclic-N scenario, not {}", sc.kind)),
        ));
    }
    let tol = sc.tolerances();
    let eq = scenario_equilibrium(sc)?;
    let system = ReducedSystem::from_equilibrium(&eq).map_err(at(Stage::Synthesis))?;
    let config = controller_config(sc, &eq).map_err(at(Stage::Synthesis))?;
    let dt = sc.grid().map_err(at(Stage::Validate))?.step();
    let eta0 = sc.initial_eta();
    let trajectory = closed_loop_reduced(
        &system,
        &config,
        &eta0,
        &mut ShapeMode::Zero,
        &ClosedLoopOptions { horizon: sc.horizon, dt, weights: None },
    )
    .map_err(at(Stage::Synthesis))?;
    let feasible_level = feasible_level_estimate(&system, &config, None, 1.0, 2000, sc.seed);
    let mut reports = vec![check_lyapunov_monotone(&trajectory.times, &trajectory.lyapunov, tol.lyapunov_slack)];
    let m = trajectory.times.len();
    let mut worst = (0.0f64, None);
    for k in 1..m.saturating_sub(1) {
        let d = (trajectory.vdot_numeric[k] - trajectory.vdot_analytic[k]).abs();
        if d > worst.0 {
            worst = (d, Some(Location { t: trajectory.times[k], age: None, species: None }));
        }
    }
    reports.push(PropertyReport::decide(
        "vdot_agreement",
        worst.0,
        10.0 * dt,
        worst.1,
        "central difference of V against its analytic derivative".into(),
    ));
    let final_norm = trajectory.eta.last().map(|e| e.iter().map(|x| x * x).sum::<f64>().sqrt()).unwrap_or(f64::NAN);
    let summary = json!({
        "u_star": eq.u_star,
        "interaction_intensities": system.lambdas,
        "growth_exponents": eq.zetas(),
        "controller": config,
        "initial_eta": eta0,
        "initially_feasible": trajectory.initially_feasible,
        "feasible_level_estimate": feasible_level,
        "final_eta_norm": final_norm,
        "clamp_events": trajectory.clamp_events,
        "guard_events": trajectory.guard_events,
        "sign_changes": trajectory.sign_changes,
        "first_sign_change": trajectory.first_sign_change,
        "passed": reports.iter().all(|r| r.status != Status::Fail),
        "reports": reports,
    });
    Ok(Synthesis { config, system, trajectory, feasible_level, reports, summary })
}

/// Writes `trajectory.csv` and `control.json`.
pub fn write_synthesis(synthesis: &Synthesis, dir: &Path) -> StageResult<()> {
    (|| -> crate::error::Result<()> {
        fs::create_dir_all(dir)?;
        let tr = &synthesis.trajectory;
        let n = synthesis.system.species();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("eta_{i}")));
        header.extend((1..n).map(|i| format!("z_{i}")));
        header.extend(["u", "V", "Vdot_analytic", "Vdot_numeric", "zlast_sign"].iter().map(|s| s.to_string()));
        let rows = (0..tr.times.len()).map(|k| {
            let mut row = vec![num(tr.times[k])];
            row.extend(tr.eta[k].iter().map(|v| num(*v)));
            row.extend(tr.z[k].iter().map(|v| num(*v)));
            row.push(num(tr.u[k]));
            row.push(num(tr.lyapunov[k]));
            row.push(num(tr.vdot_analytic[k]));
            row.push(num(tr.vdot_numeric[k]));
            row.push(tr.zlast_sign[k].to_string());
            row
        });
        write_csv(&dir.join("trajectory.csv"), &header, rows)?;
        write_json(&dir.join("control.json"), &synthesis.summary)?;
        Ok(())
    })()
    .map_err(at(Stage::Write))
}

/// Columnar numeric table read back from a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> crate::error::Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for record in r.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|s| if s.is_empty() { Ok(f64::NAN) } else { s.parse::<f64>() })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

fn read_json(path: &Path) -> crate::error::Result<serde_json::Value> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Re-derives the checks of a run directory from its files.
pub fn verify_run_dir(dir: &Path) -> StageResult<Vec<PropertyReport>> {
    verify_inner(dir).map_err(at(Stage::Verify))
}

fn verify_inner(dir: &Path) -> crate::error::Result<Vec<PropertyReport>> {
    let mut reports = Vec::new();
    let manifest_path = dir.join("manifest.json");
    let manifest = if manifest_path.exists() { Some(read_json(&manifest_path)?) } else { None };
    let tol: Tolerances = manifest
        .as_ref()
        .and_then(|m| serde_json::from_value(m["tolerances"].clone()).ok())
        .unwrap_or_default();

    let totals_path = dir.join("totals.csv");
    let trajectory_path = dir.join("trajectory.csv");
    if !totals_path.exists() && !trajectory_path.exists() {
        return Err(Error::Config(format!("{} holds neither totals.csv nor trajectory.csv", dir.display())));
    }
    if totals_path.exists() {
        let totals = Table::read(&totals_path)?;
        let t = totals.column("t").unwrap_or_default();
        let mut samples = Vec::new();
        for (j, h) in totals.header.iter().enumerate() {
            if h.starts_with("total_") {
                samples.extend(totals.rows.iter().map(|r| (r[0], f64::NAN, j - 1, r[j])));
            }
        }
        let pdir = dir.join("profiles");
        if pdir.join("index.csv").exists() {
            let mut r = csv::Reader::from_path(pdir.join("index.csv"))?;
            for rec in r.records() {
                let rec = rec?;
                let time: f64 = rec[1].parse().map_err(|e| Error::Parse(format!("index.csv: {e}")))?;
                let profile = Table::read(&pdir.join(&rec[2]))?;
                for row in &profile.rows {
                    for (i, v) in row.iter().enumerate().skip(1) {
                        samples.push((time, row[0], i - 1, *v));
                    }
                }
            }
        }
        let p = check_positivity_samples(samples, tol.positivity);
        reports.push(p);
        if let Some(v) = totals.column("V") {
            if v.iter().any(|x| x.is_finite()) {
                reports.push(check_lyapunov_monotone(&t, &v, tol.lyapunov_slack));
            }
        }
    }
    let diag_path = dir.join("diagnostics.csv");
    if diag_path.exists() {
        let diag = Table::read(&diag_path)?;
        if let (Some(t), Some(v)) = (diag.column("t"), diag.column("lyapunov")) {
            if v.iter().any(|x| x.is_finite()) {
                let mut r = check_lyapunov_monotone(&t, &v, tol.lyapunov_slack);
                r.name = "aquatic_lyapunov_monotone".into();
                reports.push(r);
            }
        }
    }
    if trajectory_path.exists() {
        let tr = Table::read(&trajectory_path)?;
        if let (Some(t), Some(v)) = (tr.column("t"), tr.column("V")) {
            let mut r = check_lyapunov_monotone(&t, &v, tol.lyapunov_slack);
            r.name = "reduced_lyapunov_monotone".into();
            reports.push(r);
        }
    }
    let cert_path = dir.join("certificate.json");
    if cert_path.exists() {
        let cert = read_json(&cert_path)?;
        let passed = cert["passed"].as_bool().unwrap_or(false);
        reports.push(PropertyReport::decide(
            "recorded_certificate",
            if passed { 0.0 } else { 1.0 },
            0.0,
            None,
            "certificate.json written by the run".into(),
        ));
    }
    Ok(reports)
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameters: Vec<(String, f64)>,
    /// `ok`, `failed-checks`, `infeasible` or `error`.
    pub status: String,
    pub converged: Option<bool>,
    pub time_to_tolerance: Option<f64>,
    pub max_u: Option<f64>,
    pub min_vdot_margin: Option<f64>,
    pub message: String,
}

/// One sweep axis: a parameter name and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub parameter: String,
    pub values: Vec<f64>,
}

fn sweep_cell(base: &Scenario, parameters: Vec<(String, f64)>) -> SweepRow {
    let mut sc = base.clone();
    let outcome = parameters
        .iter()
        .try_for_each(|(p, v)| sc.set_parameter(p, *v))
        .map_err(at(Stage::Validate))
        .and_then(|_| execute(&sc));
    match outcome {
        Ok(result) => {
            let s = result.summary;
            let failed: Vec<String> =
                s.reports.iter().filter(|r| r.status == Status::Fail).map(|r| r.name.clone()).collect();
            SweepRow {
                parameters,
                status: if failed.is_empty() { "ok".into() } else { "failed-checks".into() },
                converged: s.converged,
                time_to_tolerance: s.time_to_tolerance,
                max_u: Some(s.max_u),
                min_vdot_margin: s.min_vdot_margin,
                message: failed.join(";"),
            }
        }
        Err(e) => SweepRow {
            parameters,
            status: if e.is_infeasible() { "infeasible".into() } else { "error".into() },
            converged: None,
            time_to_tolerance: None,
            max_u: None,
            min_vdot_margin: None,
            message: e.to_string(),
        },
    }
}

/// Runs the Cartesian product of the axes, one scenario per cell, on a pool
/// of `workers` threads (each run stays single-threaded). Rows come back in
/// axis order; failing cells are recorded and the sweep continues.
pub fn sweep(base: &Scenario, axes: &[SweepAxis], workers: Option<usize>) -> crate::error::Result<Vec<SweepRow>> {
    let mut cells: Vec<Vec<(String, f64)>> = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((axis.parameter.clone(), *v));
                    c
                })
            })
            .collect();
    }
    if axes.is_empty() || cells.iter().all(|c| c.is_empty()) {
        return Ok(Vec::new());
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| cells.into_par_iter().map(|c| sweep_cell(base, c)).collect()))
}

/// Writes the sweep summary table.
pub fn write_sweep(rows: &[SweepRow], axes: usize, path: &Path) -> crate::error::Result<()> {
    let mut header = Vec::new();
    for k in 0..axes.max(1) {
        let suffix = if k == 0 { String::new() } else { format!("{}", k + 1) };
        header.push(format!("parameter{suffix}"));
        header.push(format!("value{suffix}"));
    }
    header.extend(
        ["status", "converged", "time_to_tolerance", "max_u", "min_vdot_margin", "message"].iter().map(|s| s.to_string()),
    );
    let body = rows.iter().map(|r| {
        let mut row = Vec::new();
        for (p, v) in &r.parameters {
            row.push(p.clone());
            row.push(num(*v));
        }
        row.push(r.status.clone());
        row.push(r.converged.map(|b| b.to_string()).unwrap_or_default());
        row.push(opt(r.time_to_tolerance));
        row.push(opt(r.max_u));
        row.push(opt(r.min_vdot_margin));
        row.push(r.message.clone());
        row
    });
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_csv(path, &header, body)
}

fn write_dat(path: &Path, header: &[String], rows: &[Vec<f64>]) -> crate::error::Result<()> {
    let mut text = format!("# {}\n", header.join(" "));
    for row in rows {
        text += &row.iter().map(|v| num(*v)).collect::<Vec<_>>().join(" ");
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Writes gnuplot data files under `<run>/plot/`: `totals.dat`, paired
/// `controlled.dat` / `uncontrolled.dat` when an uncontrolled twin exists,
/// and one `heatmap_<compartment>.dat` per compartment with one blank-line
/// separated block per profile snapshot (columns `t a density`).
pub fn emit_plotdata(dir: &Path) -> StageResult<Vec<PathBuf>> {
    plot_inner(dir).map_err(at(Stage::Plot))
}

fn plot_inner(dir: &Path) -> crate::error::Result<Vec<PathBuf>> {
    let totals_path = dir.join("totals.csv");
    if !totals_path.exists() {
        return Err(Error::Config(format!("missing run artifact {}", totals_path.display())));
    }
    let out = dir.join("plot");
    fs::create_dir_all(&out)?;
    let mut files = Vec::new();
    let totals = Table::read(&totals_path)?;
    let path = out.join("totals.dat");
    write_dat(&path, &totals.header, &totals.rows)?;
    files.push(path);

    let twin_path = dir.join("twin_totals.csv");
    if twin_path.exists() {
        let twin = Table::read(&twin_path)?;
        for (name, table) in [("controlled.dat", &totals), ("uncontrolled.dat", &twin)] {
            let path = out.join(name);
            write_dat(&path, &table.header, &table.rows)?;
            files.push(path);
        }
    }

    let index = dir.join("profiles").join("index.csv");
    if index.exists() {
        let mut r = csv::Reader::from_path(&index)?;
        let mut snaps = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let t: f64 = rec[1].parse().map_err(|e| Error::Parse(format!("index.csv: {e}")))?;
            snaps.push((t, Table::read(&dir.join("profiles").join(&rec[2]))?));
        }
        if let Some((_, first)) = snaps.first() {
            for (j, name) in first.header.iter().enumerate().skip(1) {
                let mut text = format!("# t a {name}\n");
                for (t, table) in &snaps {
                    for row in &table.rows {
                        text += &format!("{} {} {}\n", num(*t), num(row[0]), num(row[j]));
                    }
                    text.push('\n');
                }
                let path = out.join(format!("heatmap_{name}.dat"));
                fs::write(&path, text)?;
                files.push(path);
            }
        }
    }
    Ok(files)
}

/// Worker count from the `AGEPOP_WORKERS` environment variable.
pub fn workers_from_env() -> Option<usize> {
    std::env::var("AGEPOP_WORKERS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0)
}
