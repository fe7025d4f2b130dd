use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use qcd_core::engine::{run_trace, write_trace, RngPolicy};
use qcd_core::experiments::{
    calibrate_threshold, calibration_policy, evaluate_point, sweep, write_csv, ExperimentSpec, GridPoint, Target,
};
use qcd_core::verify::{default_scenario, run_checks};
use qcd_core::{Parallelism, QcdError};

#[derive(Parser, Debug)]
#[command(name = "qcd", version, about = "Change detection over a lossy, queued sensor link")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment spec (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, env = "QCD_SEED")]
    seed: Option<u64>,
    /// Replications per point, overriding the config.
    #[arg(long, global = true)]
    reps: Option<u64>,
    /// Worker threads: 0 picks automatically, 1 runs sequentially.
    #[arg(long, global = true, default_value_t = 0)]
    parallel: usize,
    /// No progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate metrics at the first grid point and print one CSV row.
    Simulate,
    /// Evaluate every grid point and write the CSV.
    Sweep,
    /// Find the threshold for the target false-alarm run length.
    Calibrate,
    /// Dump one replication slot by slot.
    Trace {
        /// Replication index within the seed's stream.
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Check simulator invariants on the scenario.
    Verify,
}

/// Config problems map to exit code 2; everything else to 1.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_spec(common: &Common) -> anyhow::Result<ExperimentSpec> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| ConfigError("--config is required for this command".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let mut spec: ExperimentSpec = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    if let Some(seed) = common.seed {
        spec.scenario.seed = seed;
    }
    if let Some(reps) = common.reps {
        spec.reps = reps;
    }
    spec.validate()
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

fn output(common: &Common, fallback: Option<&str>) -> anyhow::Result<Box<dyn Write>> {
    let path: Option<&Path> = common.out.as_deref().or(fallback.map(Path::new));
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn first_point(spec: &ExperimentSpec) -> GridPoint {
    let mut point = spec.points().remove(0);
    point.targets.truncate(1);
    point
}

fn note(common: &Common, msg: impl AsRef<str>) {
    if !common.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let common = &cli.common;
    let parallelism = Parallelism::from_threads(common.parallel);
    match &cli.command {
        Command::Simulate => {
            let spec = load_spec(common)?;
            let rows = evaluate_point(&spec, &first_point(&spec), parallelism);
            write_csv(output(common, None)?, &rows)?;
            Ok(rows.iter().all(|r| !r.failed()))
        }
        Command::Sweep => {
            let spec = load_spec(common)?;
            note(common, format!("{}: {} rows", spec.name, spec.row_count()));
            let rows = sweep(&spec, parallelism)?;
            write_csv(output(common, spec.output.as_deref())?, &rows)?;
            let failed = rows.iter().filter(|r| r.failed()).count();
            if failed > 0 {
                note(common, format!("{failed} rows failed"));
            }
            Ok(failed == 0)
        }
        Command::Calibrate => {
            let spec = load_spec(common)?;
            let point = spec.points().remove(0);
            let gamma = point
                .targets
                .iter()
                .find_map(|t| if let Target::Gamma(g) = t { Some(*g) } else { None })
                .ok_or_else(|| ConfigError("calibration needs a target run length (gamma)".into()))?;
            let policy = calibration_policy(point.scenario.seed);
            let cal = calibrate_threshold(
                &point.scenario,
                point.detector,
                gamma,
                &spec.calibration,
                policy,
                parallelism,
            )?;
            note(
                common,
                format!(
                    "gamma {gamma}: run length {:.2} ± {:.2}{}",
                    cal.arl.mean,
                    cal.arl.stderr,
                    if cal.arl.lower_bound { " (lower bound)" } else { "" }
                ),
            );
            let mut out = output(common, None)?;
            writeln!(out, "{}", cal.threshold)?;
            Ok(true)
        }
        Command::Trace { index } => {
            let spec = load_spec(common)?;
            let point = first_point(&spec);
            let h = match point.targets.first() {
                Some(Target::Threshold(h)) => *h,
                _ => f64::INFINITY,
            };
            let records = run_trace(
                &point.scenario,
                point.detector,
                h,
                RngPolicy::coupled(point.scenario.seed),
                *index,
            )?;
            write_trace(output(common, None)?, &records)?;
            Ok(true)
        }
        Command::Verify => {
            let mut scenario = match &common.config {
                Some(_) => load_spec(common)?.scenario,
                None => default_scenario(),
            };
            if let Some(seed) = common.seed {
                scenario.seed = seed;
            }
            let checks = run_checks(&scenario)?;
            let mut out = output(common, None)?;
            for c in &checks {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                writeln!(out, "{verdict} {}: {}", c.name, c.detail)?;
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_problem = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<QcdError>(), Some(QcdError::Config(_)));
            ExitCode::from(if config_problem { 2 } else { 1 })
        }
    }
}
