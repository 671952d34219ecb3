//! Command-line front end for the simulator and its checkers.
//!
//! Exit codes: 0 when every check passes, 1 on a violation, 2 on a
//! configuration or input error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snapkv::event::Event;
use snapkv::harness::scenario::{Mode, Scenario};
use snapkv::harness::{audit, checker, exhaustive, par, runner};
use snapkv::Error;

#[derive(Parser)]
#[command(version, about = "Run and check replicated key-value store simulations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and check its trace.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long, env = "SNAPKV_SEED")]
        seed: Option<u64>,
        /// Write the trace (prefixed by the scenario) to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Enumerate schedules. Without a scenario, enumerate every interleaving
    /// of 2 and 3 concurrent slot writers on 2 to 4 replicas.
    Sweep {
        scenario: Option<PathBuf>,
        /// Seeds to run for a random-mode scenario, starting at its seed.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Schedule cap for an exhaustive-mode scenario.
        #[arg(long, default_value_t = 100_000)]
        limit: usize,
        /// Treat each fabric phase as one step in exhaustive mode.
        #[arg(long)]
        atomic_phases: bool,
        /// Also enumerate schedules that only reorder independent steps.
        #[arg(long)]
        no_reduce: bool,
        #[arg(long, env = "SNAPKV_SEED")]
        seed: Option<u64>,
    },
    /// Check a trace file for linearizability and audit violations.
    Check { trace: PathBuf },
    /// Re-run the scenario recorded in a trace file and compare traces.
    Replay { trace: PathBuf },
}

enum Fail {
    Violation(Vec<String>),
    Input(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Input(e.to_string())
    }
}

type Outcome = Result<(), Fail>;

fn read(path: &Path) -> Result<String, Fail> {
    std::fs::read_to_string(path).map_err(|e| Fail::Input(format!("{}: {e}", path.display())))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, Fail> {
    let mut s = Scenario::parse(&read(path)?)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn verdict(problems: Vec<String>) -> Outcome {
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Fail::Violation(problems))
    }
}

fn trace_file(s: &Scenario, r: &runner::RunResult) -> String {
    let mut out: String = s.to_text().lines().map(|l| format!("# {l}\n")).collect();
    out.push_str(&r.trace_text());
    out
}

/// Split a trace file into its recorded scenario and its events.
fn parse_trace_file(text: &str) -> Result<(Option<Scenario>, Vec<Event>), Fail> {
    let mut header = String::new();
    let mut events = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if let Some(h) = line.strip_prefix('#') {
            header.push_str(h.trim_start());
            header.push('\n');
        } else if !line.trim().is_empty() {
            events.push(line.parse().map_err(|e| Fail::Input(format!("line {}: {e}", no + 1)))?);
        }
    }
    let scenario = if header.trim().is_empty() { None } else { Some(Scenario::parse(&header)?) };
    Ok((scenario, events))
}

fn run(path: &Path, seed: Option<u64>, trace: Option<&Path>) -> Outcome {
    let s = load_scenario(path, seed)?;
    let r = runner::run(&s)?;
    println!(
        "seed {}: {} requests completed, {} events, rules {:?}, {} fail queries",
        s.seed,
        r.stats.completed,
        r.trace.len(),
        r.stats.rules,
        r.stats.fail_queries
    );
    if let Some(t) = trace {
        std::fs::write(t, trace_file(&s, &r)).map_err(|e| Fail::Input(format!("{}: {e}", t.display())))?;
    }
    verdict(r.problems())
}

fn sweep_slots() -> Outcome {
    let mut problems = Vec::new();
    for writers in 2..=3 {
        for r in 2..=4 {
            let rep = exhaustive::explore(writers, r);
            println!(
                "{writers} writers, r={r}: {} states, {} schedules, {} final states, wins {:?}",
                rep.states, rep.schedules, rep.finals, rep.wins
            );
            problems.extend(rep.violations.into_iter().map(|v| format!("{writers} writers, r={r}: {v}")));
        }
    }
    verdict(problems)
}

fn sweep(path: &Path, seeds: u64, e: runner::Enumeration, seed: Option<u64>) -> Outcome {
    let s = load_scenario(path, seed)?;
    let mut problems = Vec::new();
    match s.mode {
        Mode::Exhaustive => {
            let mut n = 0;
            let (runs, complete) = runner::for_each_schedule(&s, e, |r| {
                problems.extend(r.problems().into_iter().map(|p| format!("schedule {n}: {p}")));
                n += 1;
            })?;
            println!("{runs} schedules{}", if complete { ", enumeration complete" } else { ", limit reached" });
        }
        Mode::Random => {
            let list: Vec<u64> = (s.seed..s.seed + seeds).collect();
            let results = par::map_seeds(&list, |seed| {
                let one = Scenario { seed, ..s.clone() };
                match runner::run(&one) {
                    Ok(r) => r.problems(),
                    Err(e) => vec![e.to_string()],
                }
            });
            for (seed, ps) in list.iter().zip(results) {
                problems.extend(ps.into_iter().map(|p| format!("seed {seed}: {p}")));
            }
            println!("{seeds} seeds");
        }
    }
    verdict(problems)
}

fn check(path: &Path) -> Outcome {
    let (_, events) = parse_trace_file(&read(path)?)?;
    let mut problems: Vec<String> = audit::trace_audit(&events).iter().map(ToString::to_string).collect();
    if let Err(v) = checker::check(&events) {
        problems.push(format!("linearizability: {v}"));
    }
    println!("{} events, {} operations", events.len(), checker::history(&events).len());
    verdict(problems)
}

fn replay(path: &Path) -> Outcome {
    let (scenario, events) = parse_trace_file(&read(path)?)?;
    let s = scenario.ok_or_else(|| Fail::Input("trace file records no scenario".into()))?;
    let r = runner::run(&s)?;
    if let Some(i) = (0..events.len().max(r.trace.len())).find(|i| events.get(*i) != r.trace.get(*i)) {
        let show = |e: Option<&Event>| e.map_or("<end of trace>".to_string(), ToString::to_string);
        return Err(Fail::Violation(vec![format!(
            "replay diverges at event {i}:\n  recorded: {}\n  replayed: {}",
            show(events.get(i)),
            show(r.trace.get(i))
        )]));
    }
    println!("replay of seed {} matches {} events", s.seed, events.len());
    verdict(r.problems())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Cmd::Run { scenario, seed, trace } => run(scenario, *seed, trace.as_deref()),
        Cmd::Sweep { scenario: None, .. } => sweep_slots(),
        Cmd::Sweep { scenario: Some(p), seeds, limit, atomic_phases, no_reduce, seed } => {
            let e = runner::Enumeration { atomic_phases: *atomic_phases, reduce: !*no_reduce, limit: *limit };
            sweep(p, *seeds, e, *seed)
        }
        Cmd::Check { trace } => check(trace),
        Cmd::Replay { trace } => replay(trace),
    };
    match outcome {
        Ok(()) => {
            println!("ok");
            ExitCode::SUCCESS
        }
        Err(Fail::Violation(ps)) => {
            for p in &ps {
                println!("violation: {p}");
            }
            ExitCode::from(1)
        }
        Err(Fail::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
