//! `proharq` command-line front end: single runs, V sweeps and strategy comparisons.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;

use proharq::metrics::{
    aggregate, ran_latency_series, summarize, write_channel_trace, write_controller_trace, write_latency_cdf,
    write_mac_delay_trace, write_summary_csv, write_vsweep_csv, RunMeta, SummaryReport, VSweepRow,
};
use proharq::scenario::{load_scenario_with_overrides, parse_override, Scenario, StrategySpec};
use proharq::{run_many, MetricsLog};

/// Default output root when neither `--out` nor the environment variable is set.
const DEFAULT_OUT_ROOT: &str = "runs";
const OUT_ENV: &str = "PROHARQ_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "proharq", version, about = "Slot-level downlink HARQ simulator: reactive, fixed proactive and adaptive retransmission")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the configured strategy once per seed.
    Run(Common),
    /// Sweep the controller trade-off parameter V for the adaptive strategy.
    SweepV {
        #[command(flatten)]
        common: Common,
        /// V values, either a list `0,20,40` or a range `start:stop:step` (inclusive).
        #[arg(long, default_value = "0:120:10")]
        v_grid: String,
    },
    /// Run several strategies on identical seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Strategies separated by `;` or top-level commas,
        /// e.g. `reactive,fixed(2,2,2,2,2),fixed(3,3,3,1),adaptive`.
        #[arg(long, default_value = "reactive,fixed(2,2,2,2,2),fixed(3,3,3,1),adaptive")]
        strategies: String,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (flat TOML). Absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; each invocation writes a fresh timestamped subdirectory.
    #[arg(long, env = OUT_ENV, default_value = DEFAULT_OUT_ROOT)]
    out: PathBuf,
    /// Seed, repeatable or comma separated. Defaults to the config seed.
    #[arg(long = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// `key=value` override applied on top of the config, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for independent runs (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Also write the per-slot channel and queue trace for every run.
    #[arg(long)]
    channel_trace: bool,
}

/// Written next to the outputs so every run is reproducible from its directory.
#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    config: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    seeds: Vec<u64>,
    runs: Vec<RunMeta>,
}

struct Resolved {
    base: Scenario,
    overrides: Vec<(String, String)>,
    seeds: Vec<u64>,
    jobs: usize,
}

fn resolve(c: &Common) -> Result<Resolved> {
    let source = match &c.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?,
        None => String::new(),
    };
    let overrides = c.overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>, _>>()?;
    let base = load_scenario_with_overrides(&source, &overrides).context("invalid scenario")?;
    let seeds = if c.seeds.is_empty() { vec![base.seed] } else { c.seeds.clone() };
    let jobs = if c.jobs == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { c.jobs };
    Ok(Resolved { base, overrides, seeds, jobs })
}

fn parse_v_grid(s: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = if let Some((a, rest)) = s.split_once(':') {
        let (b, step) = rest.split_once(':').unwrap_or((rest, "10"));
        let (a, b, step): (f64, f64, f64) = (a.trim().parse()?, b.trim().parse()?, step.trim().parse()?);
        if !(step > 0.0) || b < a {
            bail!("bad V range {s}");
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| a + step * i as f64).collect()
    } else {
        s.split(',').map(|v| v.trim().parse::<f64>()).collect::<Result<_, _>>().with_context(|| format!("bad V grid {s}"))?
    };
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        bail!("V grid must be a nonempty list of values >= 0 (got {s})");
    }
    Ok(grid)
}

/// Splits on `;` and on commas outside parentheses.
fn parse_strategies(s: &str) -> Result<Vec<StrategySpec>> {
    let mut parts = Vec::new();
    let (mut depth, mut cur) = (0i32, String::new());
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if ch == ';' || (ch == ',' && depth == 0) {
            parts.push(std::mem::take(&mut cur));
        } else {
            cur.push(ch);
        }
    }
    parts.push(cur);
    parts.iter().filter(|p| !p.trim().is_empty()).map(|p| Ok(p.parse::<StrategySpec>()?)).collect()
}

/// Creates `<root>/<verb>-<timestamp>`, adding a suffix on collision.
fn make_run_dir(root: &Path, verb: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f");
    for i in 0.. {
        let name = if i == 0 { format!("{verb}-{stamp}") } else { format!("{verb}-{stamp}-{i}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("cannot create {}", dir.display())),
        }
    }
    unreachable!()
}

fn execute(scenarios: &[Scenario], jobs: usize) -> Result<Vec<MetricsLog>> {
    let results = run_many(scenarios, jobs);
    let mut logs = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (s, r) in scenarios.iter().zip(results) {
        match r {
            Ok(log) => logs.push(log),
            Err(e) => failures.push(format!("{} seed {} V {}: {e}", s.strategy, s.seed, s.v_param)),
        }
    }
    if !failures.is_empty() {
        bail!("{} run(s) failed:\n  {}", failures.len(), failures.join("\n  "));
    }
    Ok(logs)
}

fn summary_rows(logs: &[MetricsLog]) -> Vec<SummaryReport> {
    let mut rows: Vec<SummaryReport> = logs.iter().map(summarize).collect();
    if rows.len() > 1 {
        let (mean, std) = aggregate(&rows).expect("nonempty");
        rows.push(mean);
        rows.push(std);
    }
    rows
}

fn write_traces(dir: &Path, logs: &[MetricsLog], channel: bool) -> Result<()> {
    let pooled: Vec<f64> = logs.iter().flat_map(ran_latency_series).collect();
    write_latency_cdf(&dir.join("latency_cdf.csv"), &pooled)?;
    for log in logs {
        let d = dir.join(format!("seed-{}", log.meta.seed));
        fs::create_dir_all(&d)?;
        write_mac_delay_trace(&d.join("mac_delay_trace.csv"), log)?;
        write_controller_trace(&d.join("controller_trace.csv"), log)?;
        if channel {
            write_channel_trace(&d.join("channel_trace.csv"), log)?;
        }
    }
    Ok(())
}

fn write_manifest(dir: &Path, verb: &str, c: &Common, r: &Resolved, logs: &[MetricsLog]) -> Result<()> {
    fs::write(dir.join("resolved_config.toml"), r.base.to_toml())?;
    let m = Manifest {
        command: verb.into(),
        config: c.config.clone(),
        overrides: r.overrides.clone(),
        seeds: r.seeds.clone(),
        runs: logs.iter().map(|l| l.meta.clone()).collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

fn cmd_run(dir: &Path, c: &Common, r: &Resolved) -> Result<()> {
    let scenarios: Vec<Scenario> = r.seeds.iter().map(|&s| r.base.with_seed(s)).collect();
    let logs = execute(&scenarios, r.jobs)?;
    write_summary_csv(&dir.join("summary.csv"), &summary_rows(&logs))?;
    write_traces(dir, &logs, c.channel_trace)?;
    write_manifest(dir, "run", c, r, &logs)
}

fn cmd_sweep_v(dir: &Path, c: &Common, r: &Resolved, grid: &[f64]) -> Result<()> {
    if r.base.strategy != StrategySpec::Adaptive {
        bail!("sweep-v needs strategy = \"adaptive\" (config has {})", r.base.strategy);
    }
    let scenarios: Vec<Scenario> =
        r.seeds.iter().flat_map(|&s| grid.iter().map(move |&v| (s, v))).map(|(s, v)| r.base.with_seed(s).with_v(v)).collect();
    let logs = execute(&scenarios, r.jobs)?;
    let rows: Vec<VSweepRow> = logs.iter().map(VSweepRow::from_log).collect();
    write_vsweep_csv(&dir.join("vsweep.csv"), &rows)?;
    if c.channel_trace {
        for log in &logs {
            write_channel_trace(&dir.join(format!("channel_trace_seed{}_v{}.csv", log.meta.seed, log.meta.v_param)), log)?;
        }
    }
    write_manifest(dir, "sweep-v", c, r, &logs)
}

fn cmd_compare(dir: &Path, c: &Common, r: &Resolved, strategies: &[StrategySpec]) -> Result<()> {
    let scenarios: Vec<Scenario> = strategies
        .iter()
        .flat_map(|st| r.seeds.iter().map(move |&s| (st, s)))
        .map(|(st, s)| r.base.with_strategy(st.clone()).with_seed(s))
        .collect();
    let logs = execute(&scenarios, r.jobs)?;
    let mut rows = Vec::new();
    for (st, chunk) in strategies.iter().zip(logs.chunks(r.seeds.len())) {
        rows.extend(summary_rows(chunk));
        let sub = dir.join(st.slug());
        fs::create_dir_all(&sub)?;
        write_traces(&sub, chunk, c.channel_trace)?;
    }
    write_summary_csv(&dir.join("summary.csv"), &rows)?;
    write_manifest(dir, "compare", c, r, &logs)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, common) = match &cli.command {
        Command::Run(c) => ("run", c),
        Command::SweepV { common, .. } => ("sweep-v", common),
        Command::Compare { common, .. } => ("compare", common),
    };
    // Argument-shape problems are usage errors (exit 2) before anything is written.
    let mut grid = Vec::new();
    let mut strategies = Vec::new();
    match &cli.command {
        Command::SweepV { v_grid, .. } => match parse_v_grid(v_grid) {
            Ok(g) => grid = g,
            Err(e) => Cli::command().error(clap::error::ErrorKind::InvalidValue, format!("--v-grid: {e:#}")).exit(),
        },
        Command::Compare { strategies: s, .. } => match parse_strategies(s) {
            Ok(v) if v.len() >= 2 => strategies = v,
            Ok(_) => Cli::command()
                .error(clap::error::ErrorKind::InvalidValue, "compare needs at least two strategies")
                .exit(),
            Err(e) => Cli::command().error(clap::error::ErrorKind::InvalidValue, format!("--strategies: {e:#}")).exit(),
        },
        Command::Run(_) => {}
    }

    let resolved = match resolve(common) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let dir = match make_run_dir(&common.out, verb) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let result = match &cli.command {
        Command::Run(c) => cmd_run(&dir, c, &resolved),
        Command::SweepV { common, .. } => cmd_sweep_v(&dir, common, &resolved, &grid),
        Command::Compare { common, .. } => cmd_compare(&dir, common, &resolved, &strategies),
    };
    match result {
        Ok(()) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&dir);
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
