use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use pinhole_core::firewall::{calibrate, table1};
use pinhole_core::metrics::{self, RunReport};
use pinhole_core::scenario::{self, Scenario, ScenarioError, PRESETS};
use pinhole_core::sim;

/// Simulate greylisting firewall pinholes in front of a SIP proxy.
#[derive(Parser)]
#[command(name = "pinhole", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or a built-in preset and write CSV reports.
    Run {
        /// Path to a scenario TOML file, or the name of a preset.
        scenario: String,
        /// Run a single seed instead of the scenario's seed list.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Output directory [default: $PINHOLE_OUT_DIR, else the scenario's `outputs`].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run seeds on separate threads.
        #[arg(long)]
        parallel: bool,
        /// Installs per capacity window.
        #[arg(long, default_value_t = metrics::DEFAULT_WINDOW)]
        window: usize,
        /// Also write the full event log of every seed.
        #[arg(long)]
        events: bool,
    },
    /// List the built-in presets.
    Presets,
    /// Fit the firewall latency model to the built-in capacity table.
    Calibrate,
}

enum Failure {
    Scenario(ScenarioError),
    Runtime(anyhow::Error),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Scenario(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            seed_override,
            out,
            parallel,
            window,
            events,
        } => run(&scenario, seed_override, out, parallel, window, events),
        Command::Presets => {
            for p in PRESETS {
                println!("{:<20} {}", p.name, p.scenario().description);
            }
            Ok(())
        }
        Command::Calibrate => calibrate_cmd(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Scenario(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve_scenario(arg: &str) -> Result<Scenario, ScenarioError> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(s) = scenario::preset(arg) {
            return Ok(s);
        }
    }
    scenario::load_scenario(path)
}

fn run(
    arg: &str,
    seed_override: Option<u64>,
    out: Option<PathBuf>,
    parallel: bool,
    window: usize,
    events: bool,
) -> Result<(), Failure> {
    let mut scenario = resolve_scenario(arg)?;
    if let Some(seed) = seed_override {
        scenario.seeds = vec![seed];
    }
    if window == 0 {
        return Err(anyhow::anyhow!("--window must be positive").into());
    }
    // Resolve once up front so calibration problems surface as scenario errors.
    scenario.latency.resolve()?;
    let out = out
        .or_else(|| std::env::var_os("PINHOLE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| scenario.outputs.clone())
        .join(&scenario.name);

    let one = |seed: u64| -> anyhow::Result<(sim::EventLog, RunReport)> {
        let log = sim::run(&scenario, seed)?;
        let report = metrics::analyze_with(&log, window)
            .with_context(|| format!("analyzing seed {seed}"))?;
        Ok((log, report))
    };
    let results: Vec<anyhow::Result<_>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = scenario
                .seeds
                .iter()
                .map(|&seed| s.spawn(move || one(seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(anyhow::anyhow!("worker panicked")))
                })
                .collect()
        })
    } else {
        scenario.seeds.iter().map(|&seed| one(seed)).collect()
    };

    let mut reports = Vec::new();
    for result in results {
        let (log, report) = result?;
        let dir = out.join(format!("seed-{}", log.seed));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        metrics::emit_csv(&report, dir.join("timeline.csv"), dir.join("summary.csv"))
            .map_err(anyhow::Error::from)?;
        if events {
            let path = dir.join("events.csv");
            let file =
                fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            log.write_csv(std::io::BufWriter::new(file))
                .with_context(|| format!("writing {}", path.display()))?;
        }
        reports.push(report);
    }
    metrics::emit_mean_timeline(
        &metrics::mean_timeline(&reports),
        out.join("mean_timeline.csv"),
    )
    .map_err(anyhow::Error::from)?;
    metrics::emit_capacity_csv(&reports, out.join("capacity.csv")).map_err(anyhow::Error::from)?;

    println!(
        "scenario {} ({} seed(s)) -> {}",
        scenario.name,
        reports.len(),
        out.display()
    );
    print!("{}", metrics::render_table(&reports));
    Ok(())
}

fn calibrate_cmd() -> Result<(), Failure> {
    let fit = calibrate(&table1()).map_err(ScenarioError::from)?;
    let m = fit.model;
    println!("per_rule_base_s               = {:.6e}", m.per_rule_base);
    println!(
        "per_existing_rule_s           = {:.6e}",
        m.per_existing_rule
    );
    println!("per_batch_base_s              = {:.6e}", m.per_batch_base);
    println!(
        "per_batch_per_existing_rule_s = {:.6e}",
        m.per_batch_per_existing_rule
    );
    println!();
    println!(
        "{:<28} {:>10} {:>10} {:>9}",
        "observation", "observed", "predicted", "residual"
    );
    for r in &fit.residuals {
        println!(
            "{:<28} {:>10.2} {:>10.2} {:>8.1}%",
            r.label,
            r.observed,
            r.predicted,
            100.0 * r.relative()
        );
    }
    println!(
        "rms relative residual: {:.1}%",
        100.0 * fit.rms_relative_residual()
    );
    Ok(())
}
