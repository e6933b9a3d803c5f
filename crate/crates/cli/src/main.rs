use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pressure_lab_cli::{run_bowen, run_measure, run_pressure_scan, run_validators, CliError, CliResult, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pressure-lab", version, about = "Pressure scans, Bowen zeros, conformal measures and distortion checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sampling seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "PRESSURE_LAB_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Pressure estimates over a t grid.
    PressureScan,
    /// Bisection for the zero of the pressure.
    Bowen,
    /// Patterson-Sullivan measures with residual and tail tables.
    Measure,
    /// Distortion checks and the box-count estimate.
    Validate,
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))?;
    match cli.command {
        Command::PressureScan => {
            let r = run_pressure_scan(&cfg, &out)?;
            print(&serde_json::json!({
                "t0": r.curve.t0,
                "t_inf": r.curve.t_inf,
                "regime": r.regime,
                "points": r.curve.entries.iter().map(|e| (e.t, e.value, e.error)).collect::<Vec<_>>(),
            }));
        }
        Command::Bowen => print(&run_bowen(&cfg, &out)?.0),
        Command::Measure => {
            let r = run_measure(&cfg, &out)?;
            print(&serde_json::json!({
                "t": r.t,
                "runs": r.runs.iter().map(|m| serde_json::json!({
                    "s": m.s,
                    "atoms": m.atoms,
                    "max_residual": m.residual.max,
                    "tail_weighted_sum": m.tail.weighted_sum,
                })).collect::<Vec<_>>(),
                "cauchy_differences": r.cauchy_differences,
            }));
        }
        Command::Validate => {
            let (suite, _) = run_validators(&cfg, &out)?;
            print(&serde_json::json!({
                "all_bounds_hold": suite.all_bounds_hold,
                "entries": suite.entries.iter().map(|e| (e.name.clone(), e.holds(), e.error.clone())).collect::<Vec<_>>(),
                "boxcount_dim": suite.boxcount.as_ref().map(|d| d.dim),
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.report() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
