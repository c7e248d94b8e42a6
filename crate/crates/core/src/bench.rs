//! Paired benchmark trials: every mode sees the same seeds, hence the same
//! targets and bus draws.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::ObjectiveMode;
use crate::scenario::{PlannerSection, ScenarioError, ScenarioFile};
use crate::sim::{run_episode, EpisodeMetrics, SimError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid trial spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("run {label}: {source}")]
    Run { label: String, source: SimError },
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
}

impl BenchError {
    /// Whether the error comes from the inputs rather than from running.
    pub fn is_config(&self) -> bool {
        match self {
            BenchError::Invalid(_) | BenchError::Scenario(_) | BenchError::Parse(_) => true,
            BenchError::Run { source, .. } => matches!(source, SimError::ConfigInvalid(_)),
            BenchError::Io { .. } => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec {
    pub scenario: ScenarioFile,
    pub seeds: Vec<u64>,
    pub modes: Vec<ObjectiveMode>,
    /// Scout-and-task robot counts; empty runs the scenario's own roles.
    pub compositions: Vec<usize>,
}

impl TrialSpec {
    pub fn new(scenario: ScenarioFile, n_runs: usize) -> Self {
        Self {
            scenario,
            seeds: (0..n_runs as u64).collect(),
            modes: vec![ObjectiveMode::MiUcb, ObjectiveMode::Expectimax],
            compositions: Vec::new(),
        }
    }

    pub fn n_runs(&self) -> usize {
        self.seeds.len()
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.seeds.is_empty() {
            return Err(BenchError::Invalid("n_runs must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(BenchError::Invalid("at least one mode is required".into()));
        }
        for &k in &self.compositions {
            self.scenario.with_composition(k)?;
        }
        Ok(())
    }
}

/// On-disk trial description. Relative scenario paths resolve against the
/// trial file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialFile {
    /// Path to a scenario file.
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    /// Name of a built-in scenario, used when `scenario` is absent.
    #[serde(default)]
    pub builtin: Option<String>,
    pub n_runs: usize,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub target_count: Option<usize>,
    #[serde(default = "default_modes")]
    pub modes: Vec<ObjectiveMode>,
    #[serde(default)]
    pub compositions: Vec<usize>,
    #[serde(default)]
    pub max_ticks: Option<u64>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub delta: Option<f64>,
}

fn default_modes() -> Vec<ObjectiveMode> {
    vec![ObjectiveMode::MiUcb, ObjectiveMode::Expectimax]
}

impl TrialFile {
    pub fn load(path: &Path) -> Result<TrialSpec, BenchError> {
        let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: TrialFile = toml::from_str(&text)?;
        file.resolve(path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, base: &Path) -> Result<TrialSpec, BenchError> {
        let mut scenario = match (&self.scenario, &self.builtin) {
            (Some(p), _) => ScenarioFile::load(&base.join(p))?,
            (None, Some(name)) => ScenarioFile::builtin(name)
                .ok_or_else(|| BenchError::Invalid(format!("unknown built-in scenario '{name}'")))?,
            (None, None) => return Err(BenchError::Invalid("trial needs `scenario` or `builtin`".into())),
        };
        if let Some(n) = self.target_count {
            scenario.targets.count = Some(n);
            scenario.targets.cells.clear();
        }
        if let Some(t) = self.max_ticks {
            scenario.episode.max_ticks = t;
        }
        if let Some(i) = self.iterations {
            scenario.planner.iterations = i;
        }
        if let Some(d) = self.delta {
            scenario.planner.delta = d;
        }
        scenario.validate()?;
        let seeds = match &self.seeds {
            Some(s) if s.len() != self.n_runs => {
                return Err(BenchError::Invalid(format!(
                    "seed list has {} entries but n_runs is {}",
                    s.len(),
                    self.n_runs
                )))
            }
            Some(s) => s.clone(),
            None => (0..self.n_runs as u64).collect(),
        };
        let spec = TrialSpec {
            scenario,
            seeds,
            modes: self.modes.clone(),
            compositions: self.compositions.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: ObjectiveMode,
    pub composition: Option<usize>,
    pub seed: u64,
    pub total_targets: usize,
    pub confirmed: usize,
    pub fraction_confirmed: f64,
    pub reward_per_distance: f64,
    pub total_distance: f64,
    pub ticks_run: u64,
    pub completion_tick: Option<u64>,
}

impl RunRecord {
    fn from_metrics(m: &EpisodeMetrics, composition: Option<usize>) -> Self {
        Self {
            mode: m.mode,
            composition,
            seed: m.seed,
            total_targets: m.total_targets,
            confirmed: m.confirmed,
            fraction_confirmed: m.fraction_confirmed,
            reward_per_distance: m.reward_per_distance,
            total_distance: m.total_distance,
            ticks_run: m.ticks_run,
            completion_tick: m.completion_tick,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        Self {
            q1: quantile(values, 0.25),
            median: quantile(values, 0.5),
            q3: quantile(values, 0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mode: ObjectiveMode,
    pub composition: Option<usize>,
    pub n: usize,
    pub fraction_confirmed: Quartiles,
    pub reward_per_distance: Quartiles,
    pub completion_tick_median: Option<f64>,
}

/// Relative improvement of MI-UCB over expectimax medians, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub composition: Option<usize>,
    pub fraction_confirmed_pct: Option<f64>,
    pub reward_per_distance_pct: Option<f64>,
}

pub fn relative_improvement(candidate: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (candidate - baseline) / baseline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub runs: Vec<RunRecord>,
    pub groups: Vec<GroupStats>,
    pub improvements: Vec<Improvement>,
}

impl BenchReport {
    pub fn from_runs(scenario: String, runs: Vec<RunRecord>) -> Self {
        let mut by_group: BTreeMap<(Option<usize>, ObjectiveMode), Vec<&RunRecord>> = BTreeMap::new();
        for r in &runs {
            by_group.entry((r.composition, r.mode)).or_default().push(r);
        }
        let groups: Vec<GroupStats> = by_group
            .iter()
            .map(|(&(composition, mode), rs)| {
                let frac: Vec<f64> = rs.iter().map(|r| r.fraction_confirmed).collect();
                let rpd: Vec<f64> = rs.iter().map(|r| r.reward_per_distance).collect();
                let done: Vec<f64> = rs.iter().filter_map(|r| r.completion_tick.map(|t| t as f64)).collect();
                GroupStats {
                    mode,
                    composition,
                    n: rs.len(),
                    fraction_confirmed: Quartiles::of(&frac),
                    reward_per_distance: Quartiles::of(&rpd),
                    completion_tick_median: (!done.is_empty()).then(|| median(&done)),
                }
            })
            .collect();
        let mut compositions: Vec<Option<usize>> = groups.iter().map(|g| g.composition).collect();
        compositions.dedup();
        let improvements = compositions
            .into_iter()
            .filter_map(|comp| {
                let find = |m| groups.iter().find(|g| g.composition == comp && g.mode == m);
                let (ucb, ex) = (find(ObjectiveMode::MiUcb)?, find(ObjectiveMode::Expectimax)?);
                Some(Improvement {
                    composition: comp,
                    fraction_confirmed_pct: relative_improvement(
                        ucb.fraction_confirmed.median,
                        ex.fraction_confirmed.median,
                    ),
                    reward_per_distance_pct: relative_improvement(
                        ucb.reward_per_distance.median,
                        ex.reward_per_distance.median,
                    ),
                })
            })
            .collect();
        Self {
            scenario,
            runs,
            groups,
            improvements,
        }
    }

    pub fn group(&self, mode: ObjectiveMode, composition: Option<usize>) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.mode == mode && g.composition == composition)
    }

    pub fn improvement(&self, composition: Option<usize>) -> Option<&Improvement> {
        self.improvements.iter().find(|i| i.composition == composition)
    }

    pub const RUNS_HEADER: &'static str = "mode,composition,seed,total_targets,confirmed,fraction_confirmed,reward_per_distance,total_distance,ticks_run,completion_tick";

    /// One row per episode.
    pub fn runs_csv(&self) -> String {
        let mut s = format!("{}\n", Self::RUNS_HEADER);
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{},{}",
                r.mode,
                opt(r.composition),
                r.seed,
                r.total_targets,
                r.confirmed,
                r.fraction_confirmed,
                r.reward_per_distance,
                r.total_distance,
                r.ticks_run,
                opt(r.completion_tick)
            );
        }
        s
    }

    /// One row per (composition, mode) group.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "composition,mode,n,fraction_q1,fraction_median,fraction_q3,rpd_q1,rpd_median,rpd_q3,completion_tick_median,fraction_improvement_pct,rpd_improvement_pct\n",
        );
        for g in &self.groups {
            let imp = self
                .improvement(g.composition)
                .filter(|_| g.mode == ObjectiveMode::MiUcb);
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                opt(g.composition),
                g.mode,
                g.n,
                g.fraction_confirmed.q1,
                g.fraction_confirmed.median,
                g.fraction_confirmed.q3,
                g.reward_per_distance.q1,
                g.reward_per_distance.median,
                g.reward_per_distance.q3,
                g.completion_tick_median.map_or(String::new(), |t| format!("{t:.1}")),
                imp.and_then(|i| i.fraction_confirmed_pct).map_or(String::new(), |v| format!("{v:.3}")),
                imp.and_then(|i| i.reward_per_distance_pct).map_or(String::new(), |v| format!("{v:.3}")),
            );
        }
        s
    }

    /// Long format for plotting tools: one metric value per row.
    pub fn plot_data_csv(&self) -> String {
        let mut s = String::from("composition,mode,seed,metric,value\n");
        for r in &self.runs {
            for (metric, value) in [
                ("fraction_confirmed", r.fraction_confirmed),
                ("reward_per_distance", r.reward_per_distance),
            ] {
                let _ = writeln!(s, "{},{},{},{},{:.6}", opt(r.composition), r.mode, r.seed, metric, value);
            }
        }
        s
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format '{other}' (expected csv or json)")),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), BenchError> {
    fs::write(path, contents).map_err(|source| BenchError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn label(mode: ObjectiveMode, composition: Option<usize>, seed: u64) -> String {
    match composition {
        Some(k) => format!("{mode}-{k}scout-seed{seed}"),
        None => format!("{mode}-seed{seed}"),
    }
}

/// Runs every (composition, mode, seed) episode, writing outputs under
/// `out_dir` when given:
///
/// - `runs/<label>.csv`: per-tick metrics of each episode
/// - `episodes.csv`: one row per episode
/// - `summary.csv` or `summary.json`: quartiles and improvements
/// - `plot_data.csv`: long-format values
pub fn run_benchmark(spec: &TrialSpec, out_dir: Option<&Path>, format: ReportFormat) -> Result<BenchReport, BenchError> {
    spec.validate()?;
    let comps: Vec<Option<usize>> = if spec.compositions.is_empty() {
        vec![None]
    } else {
        spec.compositions.iter().map(|&k| Some(k)).collect()
    };
    let mut jobs = Vec::new();
    for &comp in &comps {
        let scenario = match comp {
            Some(k) => spec.scenario.with_composition(k)?,
            None => spec.scenario.clone(),
        };
        for &mode in &spec.modes {
            for &seed in &spec.seeds {
                jobs.push((comp, mode, seed, scenario.episode_config(seed, Some(mode))?));
            }
        }
    }
    let results: Vec<Result<EpisodeMetrics, BenchError>> = jobs
        .par_iter()
        .map(|(comp, mode, seed, cfg)| {
            run_episode(cfg).map(|o| o.metrics).map_err(|source| BenchError::Run {
                label: label(*mode, *comp, *seed),
                source,
            })
        })
        .collect();
    let mut metrics = Vec::with_capacity(results.len());
    for r in results {
        metrics.push(r?);
    }
    let runs = metrics
        .iter()
        .zip(&jobs)
        .map(|(m, (comp, ..))| RunRecord::from_metrics(m, *comp))
        .collect();
    let report = BenchReport::from_runs(spec.scenario.name.clone(), runs);

    if let Some(dir) = out_dir {
        let runs_dir = dir.join("runs");
        fs::create_dir_all(&runs_dir).map_err(|source| BenchError::Io {
            path: runs_dir.display().to_string(),
            source,
        })?;
        for (m, (comp, mode, seed, _)) in metrics.iter().zip(&jobs) {
            let mut buf = Vec::new();
            m.write_ticks_csv(&mut buf).expect("writing to memory");
            let path = runs_dir.join(format!("{}.csv", label(*mode, *comp, *seed)));
            write_file(&path, std::str::from_utf8(&buf).expect("csv is utf-8"))?;
        }
        write_file(&dir.join("episodes.csv"), &report.runs_csv())?;
        write_file(&dir.join("plot_data.csv"), &report.plot_data_csv())?;
        match format {
            ReportFormat::Csv => write_file(&dir.join("summary.csv"), &report.summary_csv())?,
            ReportFormat::Json => write_file(
                &dir.join("summary.json"),
                &serde_json::to_string_pretty(&report).expect("report serializes"),
            )?,
        }
    }
    Ok(report)
}

/// Grid of planner settings for a sweep. Empty axes keep the scenario value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub delta: Vec<f64>,
    pub iterations: Vec<usize>,
    pub exploration: Vec<f64>,
    pub horizon: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delta: f64,
    pub iterations: usize,
    pub exploration: f64,
    pub horizon: usize,
    pub report: BenchReport,
}

impl SweepGrid {
    pub fn points(&self, base: &PlannerSection) -> Vec<PlannerSection> {
        let or = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let ori = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
        let mut out = Vec::new();
        for &delta in &or(&self.delta, base.delta) {
            for &iterations in &ori(&self.iterations, base.iterations) {
                for &exploration in &or(&self.exploration, base.exploration) {
                    for &horizon in &ori(&self.horizon, base.horizon) {
                        out.push(PlannerSection {
                            delta,
                            iterations,
                            exploration,
                            horizon,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Runs the trial once per grid point. Each point gets its own
/// subdirectory of `out_dir`, plus a combined `sweep.csv`.
pub fn run_sweep(
    spec: &TrialSpec,
    grid: &SweepGrid,
    out_dir: Option<&Path>,
    format: ReportFormat,
) -> Result<Vec<SweepPoint>, BenchError> {
    let mut points = Vec::new();
    for p in grid.points(&spec.scenario.planner) {
        let mut s = spec.clone();
        s.scenario.planner = p.clone();
        let name = format!("delta{}_it{}_c{}_h{}", p.delta, p.iterations, p.exploration, p.horizon);
        let dir = out_dir.map(|d| d.join(&name));
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|source| BenchError::Io {
                path: d.display().to_string(),
                source,
            })?;
        }
        let report = run_benchmark(&s, dir.as_deref(), format)?;
        points.push(SweepPoint {
            delta: p.delta,
            iterations: p.iterations,
            exploration: p.exploration,
            horizon: p.horizon,
            report,
        });
    }
    if let Some(d) = out_dir {
        let mut csv = String::from("delta,iterations,exploration,horizon,composition,mode,fraction_median,rpd_median\n");
        for pt in &points {
            for g in &pt.report.groups {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{:.6},{:.6}",
                    pt.delta,
                    pt.iterations,
                    pt.exploration,
                    pt.horizon,
                    opt(g.composition),
                    g.mode,
                    g.fraction_confirmed.median,
                    g.reward_per_distance.median
                );
            }
        }
        write_file(&d.join("sweep.csv"), &csv)?;
    }
    Ok(points)
}
