//! Confirmation reward, its cumulant generating function, the expectimax
//! baseline and the MI-UCB surrogate objective.
//!
//! All objective terms are in nats. [`PlanEvaluator`] is the allocation-free
//! route used inside the planner; the free functions are the reference route
//! and are checked against it in tests.

use std::collections::HashMap;
use std::f64::consts::E;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{cell_information_gain_nats, trajectory_information_gain_nats, OccupancyBelief};
use crate::sensing::{footprint, visibility_trajectory, Footprint, SensorSpec, VisibilityMask};
use crate::world::{
    rollout_poses, ActionSequence, CellMap, GridSpec, GroundTruth, ObstacleMap, RobotPose, RobotSpec,
    RolloutError,
};

/// Largest number of relevant cells the exact posterior enumeration accepts.
pub const MAX_ENUMERATION_CELLS: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("joint plan mixes horizons {0} and {1}")]
    HorizonMismatch(usize, usize),
    #[error("robot {robot}: {source}")]
    InvalidRollout {
        robot: usize,
        #[source]
        source: RolloutError,
    },
    #[error("instance has {0} relevant cells; exact enumeration supports at most {MAX_ENUMERATION_CELLS}")]
    TooLarge(usize),
    #[error("delta must lie in (0, 1], got {0}")]
    InvalidDelta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveMode {
    MiUcb,
    Expectimax,
}

impl ObjectiveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveMode::MiUcb => "mi-ucb",
            ObjectiveMode::Expectimax => "expectimax",
        }
    }
}

impl std::fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ObjectiveMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mi-ucb" | "miucb" => Ok(ObjectiveMode::MiUcb),
            "expectimax" => Ok(ObjectiveMode::Expectimax),
            other => Err(format!("unknown objective mode '{other}' (expected mi-ucb or expectimax)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub delta: f64,
    pub mode: ObjectiveMode,
}

impl ObjectiveConfig {
    pub fn new(delta: f64, mode: ObjectiveMode) -> Result<Self, ObjectiveError> {
        let cfg = Self { delta, mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.delta > 0.0 && self.delta <= 1.0 {
            Ok(())
        } else {
            Err(ObjectiveError::InvalidDelta(self.delta))
        }
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            mode: ObjectiveMode::MiUcb,
        }
    }
}

/// One robot's share of a joint plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanMember {
    pub robot_id: usize,
    pub scout_sensor: Option<SensorSpec>,
    pub task_sensor: Option<SensorSpec>,
    pub sequence: ActionSequence,
    pub poses: Vec<RobotPose>,
}

impl PlanMember {
    pub fn new(
        robot: &RobotSpec,
        start: RobotPose,
        sequence: ActionSequence,
        grid: &GridSpec,
        obstacles: &ObstacleMap,
    ) -> Result<Self, ObjectiveError> {
        let poses = rollout_poses(start, &sequence, grid, obstacles).map_err(|source| {
            ObjectiveError::InvalidRollout {
                robot: robot.id,
                source,
            }
        })?;
        Ok(Self {
            robot_id: robot.id,
            scout_sensor: robot.scout_sensor,
            task_sensor: robot.task_sensor,
            sequence,
            poses,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JointPlan {
    pub members: Vec<PlanMember>,
}

impl JointPlan {
    pub fn new(members: Vec<PlanMember>) -> Result<Self, ObjectiveError> {
        if let Some(first) = members.first() {
            let h = first.sequence.len();
            if let Some(m) = members.iter().find(|m| m.sequence.len() != h) {
                return Err(ObjectiveError::HorizonMismatch(h, m.sequence.len()));
            }
        }
        Ok(Self { members })
    }

    pub fn scout_trajectories(&self) -> Vec<(&[RobotPose], &SensorSpec)> {
        self.members
            .iter()
            .filter_map(|m| m.scout_sensor.as_ref().map(|s| (m.poses.as_slice(), s)))
            .collect()
    }

    pub fn task_trajectories(&self) -> Vec<(&[RobotPose], &SensorSpec)> {
        self.members
            .iter()
            .filter_map(|m| m.task_sensor.as_ref().map(|s| (m.poses.as_slice(), s)))
            .collect()
    }

    pub fn task_visibility(&self, grid: &GridSpec, obstacles: &ObstacleMap) -> VisibilityMask {
        visibility_trajectory(&self.task_trajectories(), grid, obstacles)
    }
}

/// Per-cell detection probability `P(v(i,j; q^T)) * P(E(i,j))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionField {
    pub probabilities: CellMap<f64>,
}

impl DetectionField {
    pub fn new(plan: &JointPlan, belief: &OccupancyBelief, grid: &GridSpec, obstacles: &ObstacleMap) -> Self {
        let vis = plan.task_visibility(grid, obstacles);
        let probs = vis
            .probabilities
            .as_slice()
            .iter()
            .zip(belief.probs().as_slice())
            .map(|(v, p)| v * p)
            .collect();
        Self {
            probabilities: CellMap::from_vec(grid, probs).expect("shape matches grid"),
        }
    }
}

/// Ground-truth confirmations the plan would earn. Visibility is sampled
/// for cells whose task visibility probability lies strictly inside (0, 1).
pub fn realized_reward<R: Rng + ?Sized>(
    plan: &JointPlan,
    truth: &GroundTruth,
    grid: &GridSpec,
    rng: &mut R,
) -> usize {
    let vis = plan.task_visibility(grid, &truth.obstacles);
    truth
        .targets()
        .filter(|&c| {
            let p = vis.probabilities[c];
            p >= 1.0 || (p > 0.0 && rng.gen::<f64>() < p)
        })
        .count()
}

pub fn expected_reward(plan: &JointPlan, belief: &OccupancyBelief, grid: &GridSpec, obstacles: &ObstacleMap) -> f64 {
    DetectionField::new(plan, belief, grid, obstacles)
        .probabilities
        .as_slice()
        .iter()
        .sum()
}

/// `log E[exp R]` of the Poisson-binomial confirmation count, in nats.
pub fn reward_cgf(plan: &JointPlan, belief: &OccupancyBelief, grid: &GridSpec, obstacles: &ObstacleMap) -> f64 {
    DetectionField::new(plan, belief, grid, obstacles)
        .probabilities
        .as_slice()
        .iter()
        .map(|&d| cgf_term(d))
        .sum()
}

#[inline]
pub fn cgf_term(detection_probability: f64) -> f64 {
    (detection_probability * (E - 1.0)).ln_1p()
}

/// Surrogate score: information gain of scout poses plus `delta` times the
/// reward CGF of task poses; the expected reward in expectimax mode.
pub fn mi_ucb_objective(
    plan: &JointPlan,
    belief: &OccupancyBelief,
    config: &ObjectiveConfig,
    grid: &GridSpec,
    obstacles: &ObstacleMap,
) -> f64 {
    match config.mode {
        ObjectiveMode::Expectimax => expected_reward(plan, belief, grid, obstacles),
        ObjectiveMode::MiUcb => {
            let mi = trajectory_information_gain_nats(belief, &plan.scout_trajectories(), grid, obstacles);
            mi + config.delta * reward_cgf(plan, belief, grid, obstacles)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct FootprintKey {
    sensor: [u64; 4],
    x: u64,
    y: u64,
}

impl FootprintKey {
    fn new(pose: &RobotPose, sensor: &SensorSpec) -> Self {
        Self {
            sensor: [
                sensor.range.to_bits(),
                sensor.p_visible.to_bits(),
                sensor.true_positive_rate.to_bits(),
                sensor.false_positive_rate.to_bits(),
            ],
            x: pose.position.x.to_bits(),
            y: pose.position.y.to_bits(),
        }
    }
}

/// Memoised single-pose footprints. Footprints depend only on geometry, so a
/// cache can live for a whole episode.
#[derive(Debug, Default)]
pub struct FootprintCache {
    entries: HashMap<FootprintKey, Footprint>,
}

impl FootprintCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&mut self, pose: &RobotPose, sensor: &SensorSpec, grid: &GridSpec, obstacles: &ObstacleMap) -> &Footprint {
        self.entries
            .entry(FootprintKey::new(pose, sensor))
            .or_insert_with(|| footprint(pose, sensor, grid, obstacles))
    }
}

/// Roles and poses of one robot as seen by [`PlanEvaluator::score`].
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryView<'a> {
    pub scout_sensor: Option<&'a SensorSpec>,
    pub task_sensor: Option<&'a SensorSpec>,
    pub poses: &'a [RobotPose],
}

impl<'a> From<&'a PlanMember> for TrajectoryView<'a> {
    fn from(m: &'a PlanMember) -> Self {
        Self {
            scout_sensor: m.scout_sensor.as_ref(),
            task_sensor: m.task_sensor.as_ref(),
            poses: &m.poses,
        }
    }
}

/// Objective evaluation against a fixed belief snapshot with reusable
/// scratch buffers.
pub struct PlanEvaluator<'a> {
    grid: &'a GridSpec,
    obstacles: &'a ObstacleMap,
    probs: &'a [f64],
    config: ObjectiveConfig,
    cgf_full: Vec<f64>,
    gains: Vec<([u64; 4], Vec<f64>)>,
    scout_miss: Vec<f64>,
    best_gain: Vec<f64>,
    task_miss: Vec<f64>,
    scout_touched: Vec<usize>,
    task_touched: Vec<usize>,
}

impl<'a> PlanEvaluator<'a> {
    pub fn new(
        belief: &'a OccupancyBelief,
        config: ObjectiveConfig,
        grid: &'a GridSpec,
        obstacles: &'a ObstacleMap,
    ) -> Self {
        let probs = belief.probs().as_slice();
        let n = grid.num_cells();
        Self {
            grid,
            obstacles,
            probs,
            config,
            cgf_full: probs.iter().map(|&p| cgf_term(p)).collect(),
            gains: Vec::new(),
            scout_miss: vec![1.0; n],
            best_gain: vec![0.0; n],
            task_miss: vec![1.0; n],
            scout_touched: Vec::new(),
            task_touched: Vec::new(),
        }
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    fn gain_table(&mut self, sensor: &SensorSpec) -> usize {
        let key = FootprintKey::new(&RobotPose::new(0.0, 0.0), sensor).sensor;
        if let Some(pos) = self.gains.iter().position(|(k, _)| *k == key) {
            return pos;
        }
        let table = self.probs.iter().map(|&p| cell_information_gain_nats(p, sensor)).collect();
        self.gains.push((key, table));
        self.gains.len() - 1
    }

    pub fn score(&mut self, cache: &mut FootprintCache, team: &[TrajectoryView<'_>]) -> f64 {
        let use_mi = self.config.mode == ObjectiveMode::MiUcb;
        for member in team {
            if let (true, Some(sensor)) = (use_mi, member.scout_sensor) {
                let table = self.gain_table(sensor);
                for pose in member.poses {
                    for &(k, p) in cache.get(pose, sensor, self.grid, self.obstacles) {
                        if self.scout_miss[k] == 1.0 && self.best_gain[k] == 0.0 {
                            self.scout_touched.push(k);
                        }
                        self.scout_miss[k] *= 1.0 - p;
                        let g = self.gains[table].1[k];
                        if g > self.best_gain[k] {
                            self.best_gain[k] = g;
                        }
                    }
                }
            }
            if let Some(sensor) = member.task_sensor {
                for pose in member.poses {
                    for &(k, p) in cache.get(pose, sensor, self.grid, self.obstacles) {
                        if self.task_miss[k] == 1.0 {
                            self.task_touched.push(k);
                        }
                        self.task_miss[k] *= 1.0 - p;
                    }
                }
            }
        }

        let mut mi = 0.0;
        for &k in &self.scout_touched {
            mi += (1.0 - self.scout_miss[k]) * self.best_gain[k];
            self.scout_miss[k] = 1.0;
            self.best_gain[k] = 0.0;
        }
        self.scout_touched.clear();

        let mut expected = 0.0;
        let mut cgf = 0.0;
        for &k in &self.task_touched {
            let v = 1.0 - self.task_miss[k];
            let p = self.probs[k];
            if use_mi {
                cgf += if v == 1.0 { self.cgf_full[k] } else { cgf_term(v * p) };
            } else {
                expected += v * p;
            }
            self.task_miss[k] = 1.0;
        }
        self.task_touched.clear();

        if use_mi {
            mi + self.config.delta * cgf
        } else {
            expected
        }
    }
}

/// Minimal instance for checking the MI-UCB bound by exact enumeration.
/// Each relevant cell carries its prior, scout visibility with the scout's
/// confusion matrix, and task visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct UcbInstance {
    pub cells: Vec<UcbCell>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UcbCell {
    pub prior: f64,
    pub scout_visibility: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
    pub task_visibility: f64,
}

impl UcbInstance {
    /// Collects cells touched by either the scout or task part of `plan`.
    /// Cells covered by several scout sensors use the most informative one.
    pub fn from_plan(
        plan: &JointPlan,
        belief: &OccupancyBelief,
        grid: &GridSpec,
        obstacles: &ObstacleMap,
    ) -> Result<Self, ObjectiveError> {
        let task = plan.task_visibility(grid, obstacles);
        let mut scout_miss = vec![1.0f64; grid.num_cells()];
        let mut scout_sensor: Vec<Option<(f64, SensorSpec)>> = vec![None; grid.num_cells()];
        for (poses, sensor) in plan.scout_trajectories() {
            for pose in poses {
                for (k, p) in footprint(pose, sensor, grid, obstacles) {
                    scout_miss[k] *= 1.0 - p;
                    let g = cell_information_gain_nats(belief.probs().as_slice()[k], sensor);
                    if scout_sensor[k].is_none_or(|(best, _)| g > best) {
                        scout_sensor[k] = Some((g, *sensor));
                    }
                }
            }
        }
        let mut cells = Vec::new();
        for k in 0..grid.num_cells() {
            let tv = task.probabilities.as_slice()[k];
            let sv = 1.0 - scout_miss[k];
            if (tv > 0.0 || sv > 0.0) && !obstacles.as_slice()[k] {
                let (tpr, fpr) = scout_sensor[k]
                    .map(|(_, s)| (s.true_positive_rate, s.false_positive_rate))
                    .unwrap_or((0.5, 0.5));
                cells.push(UcbCell {
                    prior: belief.probs().as_slice()[k],
                    scout_visibility: sv,
                    true_positive_rate: tpr,
                    false_positive_rate: fpr,
                    task_visibility: tv,
                });
            }
        }
        if cells.len() > MAX_ENUMERATION_CELLS {
            return Err(ObjectiveError::TooLarge(cells.len()));
        }
        Ok(Self { cells })
    }

    /// `I(y^S; E)` in nats.
    pub fn mutual_information(&self) -> f64 {
        self.cells
            .iter()
            .map(|c| {
                let s = SensorSpec::new(1.0, 1.0, c.true_positive_rate, c.false_positive_rate);
                c.scout_visibility * cell_information_gain_nats(c.prior, &s)
            })
            .sum()
    }

    pub fn reward_cgf(&self) -> f64 {
        self.cells.iter().map(|c| cgf_term(c.task_visibility * c.prior)).sum()
    }

    /// Exact `E[R | y]` by enumerating all `2^k` occupancy configurations.
    /// `reading[c]` is `None` for an unobserved cell.
    pub fn posterior_expected_reward(&self, reading: &[Option<bool>]) -> f64 {
        let k = self.cells.len();
        let mut total_weight = 0.0;
        let mut weighted_reward = 0.0;
        for config in 0u32..(1u32 << k) {
            let mut w = 1.0;
            let mut r = 0.0;
            for (idx, c) in self.cells.iter().enumerate() {
                let occupied = config >> idx & 1 == 1;
                w *= if occupied { c.prior } else { 1.0 - c.prior };
                if let Some(y) = reading[idx] {
                    let rate = if occupied { c.true_positive_rate } else { c.false_positive_rate };
                    w *= if y { rate } else { 1.0 - rate };
                }
                if occupied {
                    r += c.task_visibility;
                }
                if w == 0.0 {
                    break;
                }
            }
            total_weight += w;
            weighted_reward += w * r;
        }
        weighted_reward / total_weight
    }

    fn sample_reading<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<Option<bool>>) {
        out.clear();
        for c in &self.cells {
            let occupied = rng.gen::<f64>() < c.prior;
            let visible = rng.gen::<f64>() < c.scout_visibility;
            let rate = if occupied { c.true_positive_rate } else { c.false_positive_rate };
            let y = rng.gen::<f64>() < rate;
            out.push(visible.then_some(y));
        }
    }
}

/// Fraction of prior-predictive scout readings for which the exact posterior
/// expected reward exceeds `I(y^S; E) / delta + log E[exp R]`.
pub fn ucb_violation_rate<R: Rng + ?Sized>(
    instance: &UcbInstance,
    delta: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64, ObjectiveError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(ObjectiveError::InvalidDelta(delta));
    }
    if instance.cells.len() > MAX_ENUMERATION_CELLS {
        return Err(ObjectiveError::TooLarge(instance.cells.len()));
    }
    if n_samples == 0 {
        return Ok(0.0);
    }
    let bound = instance.mutual_information() / delta + instance.reward_cgf();
    let mut reading = Vec::with_capacity(instance.cells.len());
    let mut violations = 0usize;
    for _ in 0..n_samples {
        instance.sample_reading(rng, &mut reading);
        if instance.posterior_expected_reward(&reading) > bound + 1e-12 {
            violations += 1;
        }
    }
    Ok(violations as f64 / n_samples as f64)
}
