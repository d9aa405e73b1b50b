//! Command-line front end.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::solver::Retention;

use super::config::{ConfigError, ConfigMap, RunConfig};
use super::report::{write_metadata_json, write_study_csv, write_superrep_csv, write_surface_csv};
use super::studies::{self, RunError, RunOptions, StudyOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_ACCEPTANCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "pcpt",
    about = "Quantile hedging by piecewise constant policy timestepping"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Configuration file (`block.key = value` lines, or JSON with --json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Read the configuration file as JSON.
    #[arg(long, global = true)]
    pub json: bool,

    /// Override a configuration entry, `block.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Exit with status 3 if any acceptance check of the run fails.
    #[arg(long, global = true)]
    pub check: bool,

    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,

    /// Seed of the Monte-Carlo oracle.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads, a number or `auto`.
    #[arg(long, global = true, default_value = "auto")]
    pub threads: String,

    /// Skip the step-size conditions before each implicit step.
    #[arg(long, global = true)]
    pub unchecked_cfl: bool,

    /// Leave wall-clock times out of the outputs.
    #[arg(long, global = true)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// One backward solve: surface.csv and meta.json.
    Solve,
    /// The super-replication curve: superrep.csv.
    Superrep,
    /// Delta ladder with h = C delta, compared with the finest run.
    ConvergeNonlinear,
    /// Picard behaviour when the step-size conditions are violated.
    CflStudy,
    /// Linear-case convergence to the closed-form price.
    ConvergeLinear,
    /// Closed-form values and Monte-Carlo validation.
    Reference,
}

/// Parses `args` (including the program name), runs, and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(outcome) => report(&cli, &outcome),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RunError::Config(_) | RunError::Io(_) => EXIT_USAGE,
                RunError::Numerical(_) => EXIT_NUMERICAL,
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<ConfigMap, ConfigError> {
    let mut map = ConfigMap::defaults();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let json = cli.json || path.extension().is_some_and(|e| e == "json");
        map.merge(if json {
            ConfigMap::parse_json(&text)?
        } else {
            ConfigMap::parse_kv(&text)?
        });
    }
    for o in &cli.overrides {
        map.set(o)?;
    }
    if cli.unchecked_cfl {
        map.set("scheme.cfl_unchecked = true")?;
    }
    RunConfig::from_map(&map)?;
    Ok(map)
}

fn configure_threads(spec: &str) -> Result<(), ConfigError> {
    let n = match spec {
        "auto" => 0,
        s => s.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            ConfigError(format!(
                "--threads: expected a positive integer or `auto`, got `{s}`"
            ))
        })?,
    };
    // A global pool can only be installed once per process; later calls keep it.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, RunError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn execute(cli: &Cli) -> Result<StudyOutcome, RunError> {
    configure_threads(&cli.threads)?;
    let map = load_config(cli)?;
    fs::create_dir_all(&cli.out_dir)?;
    let dir = cli.out_dir.as_path();
    let opts = RunOptions {
        timing: !cli.no_timing,
    };

    let outcome = match cli.command {
        Command::Solve => {
            let cfg = RunConfig::from_map(&map)?;
            let retention = if cfg.all_times {
                Retention::All
            } else {
                Retention::Initial
            };
            let run = studies::run_solve(&cfg, retention)?;
            let layers: Vec<usize> = if cfg.all_times {
                (0..run.surface.times().len()).collect()
            } else {
                vec![0]
            };
            let mut w = create(dir, "surface.csv")?;
            write_surface_csv(&mut w, &run.surface, &layers, &cfg.p_samples)?;
            w.flush()?;
            let meta = studies::solve_metadata(&cfg, &run, opts)?;
            let mut w = create(dir, "meta.json")?;
            write_metadata_json(&mut w, &meta)?;
            w.flush()?;
            eprintln!(
                "solve: delta = {}, {}, {} controls ({}), {} steps, max Picard {}",
                run.xgrid.delta(),
                studies::describe_step(&cfg),
                run.controls.len(),
                studies::describe_controls(&cfg),
                run.tgrid.steps(),
                meta.picard_max
            );
            StudyOutcome {
                summary: serde_json::to_value(&meta.queries).unwrap_or_default(),
                ..Default::default()
            }
        }
        Command::Superrep => {
            let (curve, outcome) = studies::superrep(&map)?;
            let mut w = create(dir, "superrep.csv")?;
            write_superrep_csv(&mut w, &curve)?;
            w.flush()?;
            outcome
        }
        Command::ConvergeNonlinear => studies::converge_nonlinear(&map, opts)?,
        Command::CflStudy => studies::cfl_study(&map, opts)?,
        Command::ConvergeLinear => studies::converge_linear(&map, opts, cli.seed)?,
        Command::Reference => studies::reference(&map, cli.seed)?,
    };

    if !outcome.rows.is_empty() {
        let mut w = create(dir, "study.csv")?;
        write_study_csv(&mut w, &outcome.rows)?;
        w.flush()?;
    }
    if let Some((name, rows)) = &outcome.extra {
        let mut w = create(dir, name)?;
        write_study_csv(&mut w, rows)?;
        w.flush()?;
    }
    if cli.command != Command::Solve {
        let meta = json!({
            "config": map,
            "summary": outcome.summary,
            "checks": outcome.checks,
            "warnings": outcome.warnings,
        });
        let mut w = create(dir, "meta.json")?;
        write_metadata_json(&mut w, &meta)?;
        w.flush()?;
    }
    Ok(outcome)
}

fn report(cli: &Cli, outcome: &StudyOutcome) -> i32 {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let _ = writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&outcome.summary).unwrap_or_default()
    );
    for w in &outcome.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    for c in &outcome.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{tag} {}: {}", c.name, c.detail);
    }
    if cli.check && outcome.checks.iter().any(|c| !c.passed) {
        EXIT_ACCEPTANCE
    } else {
        EXIT_OK
    }
}
