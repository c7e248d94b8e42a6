use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scouttask::bench::{run_benchmark, run_sweep, BenchReport, ReportFormat, SweepGrid, TrialFile, TrialSpec};
use scouttask::objective::ObjectiveMode;
use scouttask::scenario::ScenarioFile;
use scouttask::selftest;
use scouttask::sim::{run_episode, scout_only_warning, SimError};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "scouttask", version, about = "Scout-task multi-robot coordination simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode.
    Run(RunArgs),
    /// Run a paired trial of objective modes.
    Bench(BenchArgs),
    /// Check the closed forms against exhaustive enumeration.
    Selftest(SelftestArgs),
    /// Repeat a trial over a grid of planner settings.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file; defaults to the built-in two-robot scenario.
    scenario: Option<PathBuf>,
    /// Built-in scenario name (two-robot, four-robot).
    #[arg(long, conflicts_with = "scenario")]
    builtin: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Objective mode (mi-ucb or expectimax).
    #[arg(long)]
    mode: Option<ObjectiveMode>,
    /// Give the first N robots the scout sensor and make the rest task-only.
    #[arg(long)]
    scouts: Option<usize>,
    /// Write planner and message traces.
    #[arg(long)]
    trace: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrialArgs {
    /// Trial file.
    trial: Option<PathBuf>,
    /// Built-in scenario used when no trial file is given.
    #[arg(long, conflicts_with = "trial")]
    builtin: Option<String>,
    /// Number of runs when no trial file is given.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// First seed; runs use consecutive seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one objective mode.
    #[arg(long)]
    mode: Option<ObjectiveMode>,
    /// Scout-and-task counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    scouts: Vec<usize>,
    /// Aggregate report format.
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    trial: TrialArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scout readings drawn per bound-check instance.
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    trial: TrialArgs,
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    iterations: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    exploration: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    horizon: Vec<usize>,
    #[command(flatten)]
    common: Common,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_scenario(path: Option<&Path>, builtin: Option<&str>) -> Result<ScenarioFile, Failure> {
    match (path, builtin) {
        (Some(p), _) => ScenarioFile::load(p).map_err(Failure::config),
        (None, name) => {
            let name = name.unwrap_or("two-robot");
            ScenarioFile::builtin(name).ok_or_else(|| Failure::config(format!("unknown built-in scenario '{name}'")))
        }
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("writing {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("creating {}: {e}", dir.display())))
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let mut file = load_scenario(a.scenario.as_deref(), a.builtin.as_deref())?;
    if let Some(k) = a.scouts {
        file = file.with_composition(k).map_err(Failure::config)?;
    }
    let mut cfg = file.episode_config(a.seed, a.mode).map_err(Failure::config)?;
    cfg.record_planner_trace = a.trace;
    cfg.record_message_trace = a.trace;
    if let Some(w) = scout_only_warning(&cfg.scenario, cfg.planner.objective.mode) {
        eprintln!("warning: {w}");
    }
    let out = run_episode(&cfg).map_err(|e| match e {
        SimError::ConfigInvalid(_) => Failure::config(e),
        e => Failure::runtime(e),
    })?;
    let m = &out.metrics;
    if let Some(dir) = &a.common.out {
        ensure_dir(dir)?;
        let mut ticks = Vec::new();
        m.write_ticks_csv(&mut ticks).map_err(Failure::runtime)?;
        write(&dir.join("ticks.csv"), &ticks)?;
        let mut summary = Vec::new();
        m.write_summary_csv(&mut summary).map_err(Failure::runtime)?;
        write(&dir.join("summary.csv"), &summary)?;
        let mut targets = String::from("i,j\n");
        for c in cfg.scenario.ground_truth.targets() {
            targets.push_str(&format!("{},{}\n", c.i, c.j));
        }
        write(&dir.join("targets.csv"), targets.as_bytes())?;
        if a.trace {
            let mut planner = Vec::new();
            for rec in &out.planner_trace {
                serde_json::to_writer(&mut planner, rec).map_err(Failure::runtime)?;
                planner.push(b'\n');
            }
            write(&dir.join("planner_trace.ndjson"), &planner)?;
            let mut messages = Vec::new();
            out.bus.write_trace(&mut messages).map_err(Failure::runtime)?;
            write(&dir.join("messages.ndjson"), &messages)?;
        }
    }
    if !a.common.quiet {
        println!(
            "{} mode={} seed={} confirmed={}/{} fraction={:.3} reward_per_distance={:.4} ticks={}",
            m.scenario, m.mode, m.seed, m.confirmed, m.total_targets, m.fraction_confirmed, m.reward_per_distance, m.ticks_run
        );
    }
    Ok(())
}

fn trial_spec(t: &TrialArgs) -> Result<TrialSpec, Failure> {
    let mut spec = match &t.trial {
        Some(p) => TrialFile::load(p).map_err(Failure::config)?,
        None => {
            let file = load_scenario(None, t.builtin.as_deref())?;
            let mut spec = TrialSpec::new(file, t.runs);
            if t.builtin.as_deref() == Some("four-robot") {
                spec.compositions = vec![1, 2, 3, 4];
            }
            spec
        }
    };
    if let Some(s) = t.seed {
        let n = spec.n_runs() as u64;
        spec.seeds = (s..s + n).collect();
    }
    if let Some(m) = t.mode {
        spec.modes = vec![m];
    }
    if !t.scouts.is_empty() {
        spec.compositions = t.scouts.clone();
    }
    spec.validate().map_err(Failure::config)?;
    Ok(spec)
}

fn bench_failure(e: scouttask::bench::BenchError) -> Failure {
    if e.is_config() {
        Failure::config(e)
    } else {
        Failure::runtime(e)
    }
}

fn print_report(report: &BenchReport, out: &mut impl Write) {
    for g in &report.groups {
        let comp = g.composition.map_or(String::new(), |k| format!(" scouts={k}"));
        let _ = writeln!(
            out,
            "{}{} n={} fraction median={:.3} [q1 {:.3}, q3 {:.3}] reward/distance median={:.4}",
            g.mode, comp, g.n, g.fraction_confirmed.median, g.fraction_confirmed.q1, g.fraction_confirmed.q3,
            g.reward_per_distance.median
        );
    }
    for i in &report.improvements {
        let comp = i.composition.map_or(String::new(), |k| format!(" scouts={k}"));
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:+.1}%"));
        let _ = writeln!(
            out,
            "improvement{}: fraction {} reward/distance {}",
            comp,
            pct(i.fraction_confirmed_pct),
            pct(i.reward_per_distance_pct)
        );
    }
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let spec = trial_spec(&a.trial)?;
    if let Some(dir) = &a.common.out {
        ensure_dir(dir)?;
    }
    let report = run_benchmark(&spec, a.common.out.as_deref(), a.trial.format).map_err(bench_failure)?;
    if !a.common.quiet {
        print_report(&report, &mut std::io::stdout());
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let spec = trial_spec(&a.trial)?;
    let grid = SweepGrid {
        delta: a.delta,
        iterations: a.iterations,
        exploration: a.exploration,
        horizon: a.horizon,
    };
    if let Some(dir) = &a.common.out {
        ensure_dir(dir)?;
    }
    let points = run_sweep(&spec, &grid, a.common.out.as_deref(), a.trial.format).map_err(bench_failure)?;
    if !a.common.quiet {
        let stdout = &mut std::io::stdout();
        for p in &points {
            println!(
                "delta={} iterations={} exploration={} horizon={}",
                p.delta, p.iterations, p.exploration, p.horizon
            );
            print_report(&p.report, stdout);
        }
    }
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> Result<(), Failure> {
    let results = selftest::run_all(a.seed, a.samples);
    if !a.common.quiet {
        for r in &results {
            println!("{r}");
        }
    }
    if let Some(dir) = &a.common.out {
        ensure_dir(dir)?;
        let json = serde_json::to_vec_pretty(&results).map_err(Failure::runtime)?;
        write(&dir.join("selftest.json"), &json)?;
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::runtime("one or more oracle suites failed"))
    }
}
