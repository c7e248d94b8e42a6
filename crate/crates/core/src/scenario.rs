//! TOML scenario files and the built-in scenarios.
//!
//! Obstacle rectangles and target cells use inclusive cell coordinates;
//! robot start positions are in metres.

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::BusConfig;
use crate::objective::{ObjectiveConfig, ObjectiveMode};
use crate::planner::{PlannerConfig, RolloutPolicy, Utility};
use crate::rng::stream;
use crate::sensing::SensorSpec;
use crate::sim::EpisodeConfig;
use crate::world::{Cell, CellMap, GridSpec, GroundTruth, ObstacleMap, RobotPose, RobotSpec, Scenario, WorldError};

pub const TWO_ROBOT: &str = include_str!("../../../scenarios/two_robot.toml");
pub const FOUR_ROBOT: &str = include_str!("../../../scenarios/four_robot.toml");

const STREAM_TARGETS: u64 = 10;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub i0: usize,
    pub j0: usize,
    pub i1: usize,
    pub j1: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    /// Targets placed uniformly on free cells, per seed.
    #[serde(default)]
    pub count: Option<usize>,
    /// Fixed target cells, used when `count` is absent.
    #[serde(default)]
    pub cells: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSection {
    pub id: usize,
    pub start: (f64, f64),
    #[serde(default)]
    pub scout: Option<SensorSpec>,
    #[serde(default)]
    pub task: Option<SensorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub max_ticks: u64,
    pub replan_interval: usize,
    pub stop_when_complete: bool,
    pub fuse_task_readings: bool,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self {
            max_ticks: 50,
            replan_interval: 1,
            stop_when_complete: true,
            fuse_task_readings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSection {
    pub horizon: usize,
    pub iterations: usize,
    pub exploration: f64,
    pub distribution_size: usize,
    pub temperature: Option<f64>,
    pub rollout: RolloutPolicy,
    pub mode: ObjectiveMode,
    pub delta: f64,
    pub utility: Utility,
}

impl Default for PlannerSection {
    fn default() -> Self {
        let p = PlannerConfig::default();
        Self {
            horizon: p.horizon,
            iterations: p.iterations,
            exploration: p.exploration,
            distribution_size: p.distribution_size,
            temperature: p.temperature,
            rollout: p.rollout,
            mode: p.objective.mode,
            delta: p.objective.delta,
            utility: p.utility,
        }
    }
}

impl PlannerSection {
    pub fn to_config(&self) -> PlannerConfig {
        PlannerConfig {
            horizon: self.horizon,
            iterations: self.iterations,
            exploration: self.exploration,
            distribution_size: self.distribution_size,
            temperature: self.temperature,
            rollout: self.rollout,
            objective: ObjectiveConfig {
                delta: self.delta,
                mode: self.mode,
            },
            utility: self.utility,
            ..PlannerConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub grid: GridSpec,
    #[serde(default = "default_step")]
    pub step_length: f64,
    pub prior: f64,
    #[serde(default)]
    pub obstacles: Vec<Rect>,
    #[serde(default)]
    pub targets: TargetSection,
    pub robots: Vec<RobotSection>,
    /// Long-range sensor given to scout-and-task robots in composition sweeps.
    #[serde(default)]
    pub scout_template: Option<SensorSpec>,
    #[serde(default)]
    pub episode: EpisodeSection,
    #[serde(default)]
    pub planner: PlannerSection,
    #[serde(default)]
    pub bus: BusConfig,
}

fn default_step() -> f64 {
    2.5
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let file: Self = toml::from_str(text)?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Built-in scenario by name: `two-robot` or `four-robot`.
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "two-robot" => TWO_ROBOT,
            "four-robot" => FOUR_ROBOT,
            _ => return None,
        };
        Some(Self::parse(text).expect("built-in scenarios are valid"))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.grid.validate()?;
        for r in &self.obstacles {
            if r.i0 > r.i1 || r.j0 > r.j1 || r.i1 >= self.grid.n_x || r.j1 >= self.grid.n_y {
                return Err(ScenarioError::Invalid(format!("obstacle rectangle {r:?} is empty or outside the grid")));
            }
        }
        let free = self.obstacle_map().as_slice().iter().filter(|o| !**o).count();
        match self.targets.count {
            Some(n) if n > free => {
                return Err(ScenarioError::Invalid(format!("{n} targets requested but only {free} free cells")));
            }
            Some(_) if !self.targets.cells.is_empty() => {
                return Err(ScenarioError::Invalid("give either targets.count or targets.cells, not both".into()));
            }
            _ => {}
        }
        self.build(0)?;
        Ok(())
    }

    pub fn obstacle_map(&self) -> ObstacleMap {
        let cells = self
            .obstacles
            .iter()
            .flat_map(|r| (r.i0..=r.i1).flat_map(move |i| (r.j0..=r.j1).map(move |j| Cell::new(i, j))));
        ObstacleMap::from_cells(&self.grid, cells)
    }

    pub fn target_count(&self) -> usize {
        self.targets.count.unwrap_or(self.targets.cells.len())
    }

    /// Builds the scenario, drawing target cells from `seed` when they are random.
    pub fn build(&self, seed: u64) -> Result<Scenario, ScenarioError> {
        let grid = self.grid;
        let obstacles = self.obstacle_map();
        let targets: Vec<Cell> = match self.targets.count {
            Some(n) => {
                let free: Vec<Cell> = grid.cells().filter(|&c| !obstacles[c]).collect();
                let mut rng = stream(seed, &[STREAM_TARGETS]);
                let mut picked: Vec<Cell> = sample(&mut rng, free.len(), n).into_iter().map(|k| free[k]).collect();
                picked.sort();
                picked
            }
            None => self.targets.cells.iter().map(|&(i, j)| Cell::new(i, j)).collect(),
        };
        for c in &targets {
            if !grid.is_valid_cell(c.i as isize, c.j as isize) {
                return Err(ScenarioError::Invalid(format!("target {c:?} is outside the grid")));
            }
        }
        let occupancy = CellMap::from_vec(&grid, grid.cells().map(|c| targets.contains(&c)).collect())
            .expect("shape matches grid");
        let scenario = Scenario {
            name: self.name.clone(),
            grid,
            ground_truth: GroundTruth::new(occupancy, obstacles)?,
            robots: self
                .robots
                .iter()
                .map(|r| RobotSpec {
                    id: r.id,
                    scout_sensor: r.scout,
                    task_sensor: r.task,
                    start_pose: RobotPose::new(r.start.0, r.start.1),
                })
                .collect(),
            step_length: self.step_length,
            prior: self.prior,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Copy in which the first `scouts` robots (by id) carry the scout
    /// template and the rest carry only their task sensor.
    pub fn with_composition(&self, scouts: usize) -> Result<Self, ScenarioError> {
        if scouts > self.robots.len() {
            return Err(ScenarioError::Invalid(format!(
                "{scouts} scouts requested but the scenario has {} robots",
                self.robots.len()
            )));
        }
        let template = self
            .scout_template
            .or_else(|| self.robots.iter().find_map(|r| r.scout))
            .unwrap_or_else(|| SensorSpec::default_scout(self.grid.cell_size));
        let mut out = self.clone();
        out.robots.sort_by_key(|r| r.id);
        for (k, r) in out.robots.iter_mut().enumerate() {
            r.scout = (k < scouts).then_some(template);
            if r.task.is_none() {
                r.task = Some(SensorSpec::default_task(self.grid.cell_size));
            }
        }
        out.name = format!("{}-{}scout", self.name, scouts);
        Ok(out)
    }

    /// Episode config for `seed`, optionally overriding the objective mode.
    pub fn episode_config(&self, seed: u64, mode: Option<ObjectiveMode>) -> Result<EpisodeConfig, ScenarioError> {
        let mut planner = self.planner.to_config();
        if let Some(m) = mode {
            planner.objective.mode = m;
        }
        let mut cfg = EpisodeConfig::new(self.build(seed)?, planner, seed);
        cfg.bus = self.bus.clone();
        cfg.max_ticks = self.episode.max_ticks;
        cfg.replan_interval = self.episode.replan_interval;
        cfg.stop_when_complete = self.episode.stop_when_complete;
        cfg.fuse_task_readings = self.episode.fuse_task_readings;
        cfg.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}
