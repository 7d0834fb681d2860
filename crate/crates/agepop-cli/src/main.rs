//! Command-line front end: runs scenario files and inspects run directories.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agepop::mosquito::Strategy;
use agepop::pipeline::{
    emit_plotdata, execute, synthesize_control, sweep, verify_run_dir, write_equilibrium, write_run, write_sweep,
    write_synthesis, Stage, StageError, SweepAxis,
};
use agepop::scenario::{load_scenario, ModelKind, Scenario};
use agepop::verification::Status;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agepop", version, about = "Age-structured population simulation and control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline of a scenario and write its run directory.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and print the steady state of a scenario.
    Equilibrium {
        #[arg(long)]
        scenario: PathBuf,
        /// Also write equilibrium.json and equilibrium.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the feedback law of a cyclic scenario and integrate the reduced closed loop.
    SynthesizeControl {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a mosquito scenario under a given strategy.
    Mosquito {
        #[arg(long)]
        scenario: PathBuf,
        /// none, bio, bio-static or genetic.
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-derive the checks of one or more run directories from their files.
    Verify {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
    /// Run a scenario over a list of parameter values (one or two axes).
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values; an empty string gives an empty table.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long, requires = "values2")]
        param2: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        values2: Option<String>,
        /// Summary CSV path.
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        /// Worker threads (one run per worker).
        #[arg(long, env = "AGEPOP_WORKERS")]
        workers: Option<usize>,
    },
    /// Write gnuplot data files for a run directory.
    Plotdata { run_dir: PathBuf },
}

fn load(path: &Path) -> Result<Scenario, StageError> {
    load_scenario(path).map_err(|e| {
        let stage = if matches!(e, agepop::Error::Validation(_)) { Stage::Validate } else { Stage::Load };
        StageError::new(stage, e)
    })
}

fn parse_values(text: &str) -> Result<Vec<f64>, StageError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| StageError::new(Stage::Load, agepop::Error::Parse(format!("sweep value '{s}': {e}"))))
        })
        .collect()
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn simulate(scenario: &Scenario, out: &Path) -> Result<ExitCode, StageError> {
    let result = execute(scenario)?;
    write_run(scenario, &result, out)?;
    for r in &result.summary.reports {
        println!("{}", r.summary());
    }
    println!("run directory: {}", out.display());
    if result.summary.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("[verify] at least one certificate failed");
        Ok(ExitCode::from(1))
    }
}

fn run(cli: Cli) -> Result<ExitCode, StageError> {
    match cli.command {
        Command::Simulate { scenario, out } => simulate(&load(&scenario)?, &out),
        Command::Mosquito { scenario, strategy, out } => {
            let mut sc = load(&scenario)?;
            if !matches!(sc.kind, ModelKind::MosquitoBio | ModelKind::MosquitoGenetic) {
                return Err(StageError::new(
                    Stage::Validate,
                    agepop::Error::Config(format!("mosquito command needs a mosquito scenario, not {}", sc.kind)),
                ));
            }
            sc.kind = if strategy == Strategy::Genetic { ModelKind::MosquitoGenetic } else { ModelKind::MosquitoBio };
            if let Some(m) = sc.mosquito.as_mut() {
                m.strategy = Some(strategy);
            }
            simulate(&sc, &out)
        }
        Command::Equilibrium { scenario, out } => {
            let sc = load(&scenario)?;
            let value = match out {
                Some(dir) => write_equilibrium(&sc, &dir)?,
                None => agepop::pipeline::equilibrium_report(&sc)?.0,
            };
            print_json(&value);
            Ok(ExitCode::SUCCESS)
        }
        Command::SynthesizeControl { scenario, out } => {
            let sc = load(&scenario)?;
            let synthesis = synthesize_control(&sc)?;
            if let Some(dir) = &out {
                write_synthesis(&synthesis, dir)?;
            }
            print_json(&synthesis.summary);
            let failed = synthesis.reports.iter().any(|r| r.status == Status::Fail);
            Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Command::Verify { run_dirs } => {
            let mut failed = false;
            for dir in &run_dirs {
                let reports = verify_run_dir(dir)?;
                println!("{}:", dir.display());
                for r in &reports {
                    println!("  {}", r.summary());
                    failed |= r.status == Status::Fail;
                }
            }
            Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Command::Sweep { scenario, param, values, param2, values2, out, workers } => {
            let sc = load(&scenario)?;
            let mut axes = vec![SweepAxis { parameter: param, values: parse_values(&values)? }];
            if let (Some(p), Some(v)) = (param2, values2) {
                axes.push(SweepAxis { parameter: p, values: parse_values(&v)? });
            }
            let rows = sweep(&sc, &axes, workers).map_err(|e| StageError::new(Stage::Simulate, e))?;
            write_sweep(&rows, axes.len(), &out).map_err(|e| StageError::new(Stage::Write, e))?;
            for r in &rows {
                let params: Vec<String> = r.parameters.iter().map(|(p, v)| format!("{p}={v}")).collect();
                println!("{} {} {}", params.join(" "), r.status, r.message);
            }
            println!("summary: {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Plotdata { run_dir } => {
            for f in emit_plotdata(&run_dir)? {
                println!("{}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
