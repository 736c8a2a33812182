//! `mrsim` — run hybrid-node scenarios and export metrics and traces.
//!
//! Exit codes: 0 on success, 1 when the run recorded invariant violations,
//! 2 on validation or usage errors.

use anyhow::Context;
use clap::{Parser, Subcommand};
use hybridmr::{
    builtin_scenario, export_report, export_trace, load_scenario, parse_format, run_scenario,
    RunOptions, ScenarioError, SimTime, BUILTIN_NAMES,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mrsim", version, about = "Hybrid-node scenario simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or a built-in scenario by name.
    Run {
        /// Path to a scenario file, or one of the built-ins
        /// (fig5, fig5-delegation, fig5-saturated).
        scenario: String,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario's end time, in simulated ms.
        #[arg(long = "t-end")]
        t_end_ms: Option<f64>,
        /// Write the metrics report to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the full event trace (newline-delimited JSON) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Report format: json or csv.
        #[arg(long, default_value = "json")]
        format: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, seed, t_end_ms, out, trace, format } => {
            match run(scenario, seed, t_end_ms, out, trace, format) {
                Ok(violations) => {
                    if violations {
                        ExitCode::from(1)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(2)
                }
            }
        }
    }
}

fn run(
    scenario: String,
    seed: Option<u64>,
    t_end_ms: Option<f64>,
    out: Option<PathBuf>,
    trace_path: Option<PathBuf>,
    format: String,
) -> anyhow::Result<bool> {
    let format = parse_format(&format)?;
    let text = match builtin_scenario(&scenario) {
        Some(text) => text.to_string(),
        None => std::fs::read_to_string(&scenario).with_context(|| {
            format!(
                "cannot read scenario '{scenario}' (not a file, and not one of {})",
                BUILTIN_NAMES.join(", ")
            )
        })?,
    };
    let spec = match load_scenario(&text) {
        Ok(spec) => spec,
        Err(ScenarioError::Validation(errors)) => {
            for e in &errors {
                eprintln!("validation: {e}");
            }
            anyhow::bail!("{} validation error(s)", errors.len());
        }
        Err(e) => return Err(e.into()),
    };

    let opts = RunOptions {
        seed_override: seed,
        t_end_override: t_end_ms.map(SimTime::from_ms),
        ..RunOptions::default()
    };
    let output = run_scenario(&spec, &opts);

    let report_bytes = export_report(&output.report, format);
    match &out {
        Some(path) => {
            std::fs::write(path, &report_bytes)
                .with_context(|| format!("cannot write report to {}", path.display()))?;
        }
        None => {
            print!("{}", String::from_utf8_lossy(&report_bytes));
        }
    }
    if let Some(path) = &trace_path {
        std::fs::write(path, export_trace(&output.trace))
            .with_context(|| format!("cannot write trace to {}", path.display()))?;
    }

    let states: Vec<String> = output
        .report
        .final_states
        .iter()
        .map(|(n, s)| format!("{n}={s}"))
        .collect();
    eprintln!(
        "{}: {} events, {} transitions, max hop {}, states [{}], violations {}",
        output.report.scenario,
        output.report.events_processed,
        output.report.state_transitions,
        output.report.max_hop_count,
        states.join(" "),
        output.report.violations.total(),
    );
    Ok(output.has_violations())
}
