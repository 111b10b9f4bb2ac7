use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use eraswitch::history::History;
use eraswitch::metrics::{events_csv, latency_csv, p90_csv, samples};
use eraswitch::report::Summary;
use eraswitch::runner::run;
use eraswitch::scenario::Scenario;
use eraswitch::validator::validate;

#[derive(Parser)]
#[command(name = "eraswitch", about = "Simulate and check runtime consensus switching")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its trace, history and CSV series.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `out/<scenario name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a trace and history against the safety properties.
    Validate { trace: PathBuf, history: PathBuf },
    /// Summarise a history: answers, timeouts, downtime and p90 per era.
    Report { history: PathBuf },
    /// Run a scenario under many seeds and validate each run.
    Sweep {
        template: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1)]
        first_seed: u64,
    },
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Scenario::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_history(path: &Path) -> Result<History> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    History::read_jsonl(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_run(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<bool> {
    let mut sc = load_scenario(path)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let dir = out.unwrap_or_else(|| PathBuf::from("out").join(&sc.name));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let output = run(&sc)?;
    let trace = output.trace_text();
    let recs = &output.history.records;
    let s = samples(recs);
    fs::write(dir.join("trace.txt"), &trace)?;
    fs::write(dir.join("history.jsonl"), output.history.to_jsonl())?;
    fs::write(dir.join("latency.csv"), latency_csv(&s))?;
    fs::write(dir.join("p90.csv"), p90_csv(&s))?;
    fs::write(dir.join("events.csv"), events_csv(recs))?;
    print!("{}", Summary::from_records(recs));
    if output.stalled {
        println!("transition stalled: a member is still stopped");
    }
    let report = validate(recs, Some(&trace));
    print!("{report}");
    println!("wrote {}", dir.display());
    Ok(report.passed())
}

fn cmd_validate(trace: &Path, history: &Path) -> Result<bool> {
    let text = fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let h = load_history(history)?;
    let report = validate(&h.records, Some(&text));
    print!("{report}");
    Ok(report.passed())
}

fn cmd_sweep(path: &Path, seeds: u64, first: u64) -> Result<bool> {
    let base = load_scenario(path)?;
    let mut failed = 0;
    for seed in first..first + seeds {
        let mut sc = base.clone();
        sc.seed = seed;
        let output = run(&sc)?;
        let report = validate(&output.history.records, Some(&output.trace_text()));
        let summary = Summary::from_records(&output.history.records);
        let verdict = if report.passed() { "ok" } else { "FAIL" };
        println!(
            "seed {seed}: {verdict}  answered {}  timeouts {}  eras {}",
            summary.answered,
            summary.timeouts + summary.truncated,
            summary.eras.len()
        );
        if !report.passed() {
            failed += 1;
            for c in report.failed() {
                println!("  {}: {}", c.name, c.failure.as_deref().unwrap_or(""));
            }
        }
    }
    println!("{} of {seeds} seeds passed", seeds - failed);
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { scenario, seed, out } => cmd_run(&scenario, seed, out),
        Cmd::Validate { trace, history } => cmd_validate(&trace, &history),
        Cmd::Report { history } => load_history(&history).map(|h| {
            print!("{}", Summary::from_records(&h.records));
            true
        }),
        Cmd::Sweep { template, seeds, first_seed } => cmd_sweep(&template, seeds, first_seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
