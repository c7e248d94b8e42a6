//! Per-robot decentralised MCTS.
//!
//! Each robot searches over its own action sequences. Every iteration fixes
//! the teammates at one sequence drawn from their most recent published
//! [`PlanDistribution`] and scores the joint plan with the team objective.
//! After a round the searched sequences are compressed into a top-K softmax
//! distribution that the robot publishes to its teammates.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::OccupancyBelief;
use crate::objective::{FootprintCache, ObjectiveConfig, PlanEvaluator, TrajectoryView};
use crate::world::{
    rollout_poses, step, ActionSequence, GridSpec, Heading, MotionPrimitive, ObstacleMap, RobotPose, RobotSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("no primitive in the action set is valid from the current pose")]
    NoValidAction { fallback: ActionSequence },
    #[error("invalid planner config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutPolicy {
    /// Uniformly random valid primitives.
    Random,
    /// Primitive whose next pose covers the most expected reward (or, for
    /// scout-only robots, the most unexplored probability mass); ties random.
    Greedy,
}

/// How a sampled joint plan is scored for the planning robot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Utility {
    /// Joint score minus the score of the same teammate sample without this
    /// robot, so teammate sampling noise cancels.
    #[default]
    Marginal,
    /// Joint score as is.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub iterations: usize,
    pub exploration: f64,
    pub distribution_size: usize,
    /// Softmax temperature; `None` uses a quarter of the score range seen in the tree.
    pub temperature: Option<f64>,
    pub rollout: RolloutPolicy,
    pub objective: ObjectiveConfig,
    pub utility: Utility,
    /// Candidate primitives, in tie-break order.
    pub actions: Vec<Heading>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            iterations: 3000,
            exploration: std::f64::consts::SQRT_2,
            distribution_size: 5,
            temperature: None,
            rollout: RolloutPolicy::Random,
            objective: ObjectiveConfig::default(),
            utility: Utility::Marginal,
            actions: Heading::ALL.to_vec(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: String| Err(PlannerError::InvalidConfig(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.exploration.is_nan() || self.exploration <= 0.0 {
            return bad(format!("exploration constant must be positive, got {}", self.exploration));
        }
        if self.distribution_size == 0 {
            return bad("distribution size must be at least 1".into());
        }
        if let Some(t) = self.temperature {
            if t.is_nan() || t <= 0.0 {
                return bad(format!("temperature must be positive, got {t}"));
            }
        }
        if self.actions.is_empty() {
            return bad("action set is empty".into());
        }
        self.objective
            .validate()
            .map_err(|e| PlannerError::InvalidConfig(e.to_string()))
    }
}

/// A robot's published intent: weighted candidate sequences from `start_pose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDistribution {
    pub robot_id: usize,
    pub start_pose: RobotPose,
    pub entries: Vec<(ActionSequence, f64)>,
    /// Planning round (tick) that produced the distribution.
    pub timestamp: u64,
}

/// What a planner knows about one teammate.
#[derive(Debug, Clone, Copy)]
pub struct TeammateView<'a> {
    pub spec: &'a RobotSpec,
    /// Last reported pose, used for the STAY default.
    pub pose: RobotPose,
    pub distribution: Option<&'a PlanDistribution>,
}

/// Independent categorical draw per teammate; teammates without a
/// distribution are assumed to stay put.
pub fn sample_teammates<R: Rng + ?Sized>(
    teammates: &[TeammateView<'_>],
    horizon: usize,
    rng: &mut R,
) -> BTreeMap<usize, ActionSequence> {
    teammates
        .iter()
        .map(|t| {
            let seq = match t.distribution {
                Some(d) if !d.entries.is_empty() => d.entries[sample_index(&d.entries, rng)].0.clone(),
                _ => ActionSequence::stay(t.spec.id, horizon),
            };
            (t.spec.id, seq)
        })
        .collect()
}

fn sample_index<R: Rng + ?Sized, T>(entries: &[(T, f64)], rng: &mut R) -> usize {
    if entries.len() == 1 {
        return 0;
    }
    let total: f64 = entries.iter().map(|(_, w)| w).sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, (_, w)) in entries.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    entries.len() - 1
}

type NodeId = usize;

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub heading: Option<Heading>,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub pose: RobotPose,
    pub children: Vec<NodeId>,
    pub untried: Vec<Heading>,
    pub visits: u64,
    pub total: f64,
}

impl TreeNode {
    pub fn mean(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.total / self.visits as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SequenceStats {
    total: f64,
    count: u64,
}

/// Search tree over one robot's primitive prefixes, plus the statistics of
/// every complete-horizon sequence evaluated during the round.
#[derive(Debug, Clone)]
pub struct SearchTree {
    robot_id: usize,
    start: RobotPose,
    step_length: f64,
    horizon: usize,
    nodes: Vec<TreeNode>,
    complete: HashMap<Vec<Heading>, SequenceStats>,
    min_score: f64,
    max_score: f64,
}

impl SearchTree {
    fn new(robot_id: usize, start: RobotPose, step_length: f64, horizon: usize, root_untried: Vec<Heading>) -> Self {
        Self {
            robot_id,
            start,
            step_length,
            horizon,
            nodes: vec![TreeNode {
                heading: None,
                parent: None,
                depth: 0,
                pose: start,
                children: Vec::new(),
                untried: root_untried,
                visits: 0,
                total: 0.0,
            }],
            complete: HashMap::new(),
            min_score: f64::INFINITY,
            max_score: f64::NEG_INFINITY,
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn score_range(&self) -> Option<(f64, f64)> {
        (self.min_score <= self.max_score).then_some((self.min_score, self.max_score))
    }

    /// Complete sequences with their mean score, best first; ties are broken
    /// lexicographically on primitive order.
    pub fn ranked_sequences(&self) -> Vec<(Vec<Heading>, f64, u64)> {
        let mut ranked: Vec<_> = self
            .complete
            .iter()
            .map(|(k, s)| (k.clone(), s.total / s.count as f64, s.count))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked
    }

    fn normalized(&self, mean: f64) -> f64 {
        if self.max_score > self.min_score {
            (mean - self.min_score) / (self.max_score - self.min_score)
        } else {
            0.5
        }
    }

    fn select_child(&self, id: NodeId, c: f64) -> NodeId {
        let parent = &self.nodes[id];
        let ln_n = (parent.visits.max(1) as f64).ln();
        let mut best = parent.children[0];
        let mut best_value = f64::NEG_INFINITY;
        for &child in &parent.children {
            let n = &self.nodes[child];
            let value = self.normalized(n.mean()) + c * (ln_n / n.visits as f64).sqrt();
            if value > best_value {
                best_value = value;
                best = child;
            }
        }
        best
    }

    fn prefix(&self, mut id: NodeId, headings: &mut Vec<Heading>, poses: &mut Vec<RobotPose>) {
        headings.clear();
        poses.clear();
        while let Some(h) = self.nodes[id].heading {
            headings.push(h);
            poses.push(self.nodes[id].pose);
            id = self.nodes[id].parent.expect("non-root node has a parent");
        }
        headings.reverse();
        poses.reverse();
    }

    fn record(&mut self, path: &[NodeId], headings: &[Heading], score: f64) {
        for &id in path {
            let n = &mut self.nodes[id];
            n.visits += 1;
            n.total += score;
        }
        let s = self.complete.entry(headings.to_vec()).or_default();
        s.total += score;
        s.count += 1;
        self.min_score = self.min_score.min(score);
        self.max_score = self.max_score.max(score);
    }

    /// Follows the most-visited child (ties: higher mean, then primitive
    /// order) and completes the prefix with its best evaluated extension.
    pub fn best_sequence(&self) -> ActionSequence {
        let mut id = 0;
        let mut prefix = Vec::new();
        while !self.nodes[id].children.is_empty() {
            let mut best = self.nodes[id].children[0];
            for &c in &self.nodes[id].children[1..] {
                let (a, b) = (&self.nodes[c], &self.nodes[best]);
                if a.visits > b.visits || (a.visits == b.visits && a.mean() > b.mean()) {
                    best = c;
                }
            }
            prefix.push(self.nodes[best].heading.expect("child has a heading"));
            id = best;
        }
        let mut headings = self
            .ranked_sequences()
            .into_iter()
            .map(|(h, _, _)| h)
            .find(|h| h.starts_with(&prefix))
            .unwrap_or(prefix);
        headings.resize(self.horizon, Heading::Stay);
        ActionSequence::from_headings(self.robot_id, &headings, self.step_length)
    }
}

/// Top-K complete sequences with softmax weights over their mean scores.
pub fn compress_distribution(tree: &SearchTree, config: &PlannerConfig, timestamp: u64) -> PlanDistribution {
    let ranked = tree.ranked_sequences();
    let top: Vec<_> = ranked.into_iter().take(config.distribution_size).collect();
    let beta = config.temperature.unwrap_or_else(|| {
        tree.score_range()
            .map(|(lo, hi)| (hi - lo) / 4.0)
            .unwrap_or(0.0)
    });
    let best = top.first().map(|t| t.1).unwrap_or(0.0);
    let raw: Vec<f64> = top
        .iter()
        .map(|(_, mean, _)| if beta > 0.0 { ((mean - best) / beta).exp() } else { 1.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    let entries = top
        .iter()
        .zip(raw)
        .map(|((h, _, _), w)| {
            (
                ActionSequence::from_headings(tree.robot_id, h, tree.step_length),
                w / total,
            )
        })
        .collect();
    PlanDistribution {
        robot_id: tree.robot_id,
        start_pose: tree.start,
        entries,
        timestamp,
    }
}

/// Everything one planning round needs.
pub struct PlanRequest<'a> {
    pub robot: &'a RobotSpec,
    pub pose: RobotPose,
    pub belief: &'a OccupancyBelief,
    pub grid: &'a GridSpec,
    pub obstacles: &'a ObstacleMap,
    pub step_length: f64,
    pub teammates: &'a [TeammateView<'a>],
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootStat {
    pub heading: Heading,
    pub visits: u64,
    pub mean: f64,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub best: ActionSequence,
    pub distribution: PlanDistribution,
    /// Mean score of the chosen sequence.
    pub objective: f64,
    pub root: Vec<RootStat>,
    pub tree: SearchTree,
}

/// One line of the planner trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerTraceRecord {
    pub round: u64,
    pub robot: usize,
    pub chosen: String,
    pub root: Vec<RootStat>,
    pub objective: f64,
}

impl PlanOutcome {
    pub fn trace_record(&self, round: u64) -> PlannerTraceRecord {
        PlannerTraceRecord {
            round,
            robot: self.best.robot_id,
            chosen: self.best.describe(),
            root: self.root.clone(),
            objective: self.objective,
        }
    }
}

fn valid_actions(pose: RobotPose, actions: &[Heading], step_length: f64, grid: &GridSpec, obstacles: &ObstacleMap) -> Vec<(Heading, RobotPose)> {
    actions
        .iter()
        .filter_map(|&h| {
            step(pose, MotionPrimitive::new(h, step_length), grid, obstacles)
                .ok()
                .map(|p| (h, p))
        })
        .collect()
}

struct TeammateIntent<'a> {
    spec: &'a RobotSpec,
    /// Rolled-out poses of each distribution entry; a single STAY entry when absent.
    candidates: Vec<(Vec<RobotPose>, f64)>,
}

fn teammate_intents<'a>(req: &PlanRequest<'a>, horizon: usize) -> Vec<TeammateIntent<'a>> {
    req.teammates
        .iter()
        .map(|t| {
            let stay = || vec![(vec![t.pose; horizon], 1.0)];
            let candidates = match t.distribution {
                Some(d) if !d.entries.is_empty() => {
                    // Skip the steps already executed since the distribution was made.
                    let skip = req.round.saturating_sub(d.timestamp) as usize;
                    let rolled: Vec<_> = d
                        .entries
                        .iter()
                        .filter_map(|(seq, w)| {
                            let poses = rollout_poses(d.start_pose, seq, req.grid, req.obstacles).ok()?;
                            let last = poses.last().copied().unwrap_or(d.start_pose);
                            let aligned = (0..horizon).map(|k| poses.get(skip + k).copied().unwrap_or(last)).collect();
                            Some((aligned, *w))
                        })
                        .collect();
                    if rolled.is_empty() {
                        stay()
                    } else {
                        rolled
                    }
                }
                _ => stay(),
            };
            TeammateIntent { spec: t.spec, candidates }
        })
        .collect()
}

/// Runs one round of MCTS for `req.robot` and returns its chosen sequence
/// and compressed plan distribution.
pub fn plan_round<R: Rng + ?Sized>(
    req: &PlanRequest<'_>,
    config: &PlannerConfig,
    cache: &mut FootprintCache,
    rng: &mut R,
) -> Result<PlanOutcome, PlannerError> {
    config.validate()?;
    let h = config.horizon;
    let root_actions: Vec<Heading> = valid_actions(req.pose, &config.actions, req.step_length, req.grid, req.obstacles)
        .into_iter()
        .map(|(a, _)| a)
        .collect();
    if root_actions.is_empty() {
        return Err(PlannerError::NoValidAction {
            fallback: ActionSequence::stay(req.robot.id, h),
        });
    }

    let mut tree = SearchTree::new(req.robot.id, req.pose, req.step_length, h, root_actions);
    let intents = teammate_intents(req, h);
    let mut evaluator = PlanEvaluator::new(req.belief, config.objective, req.grid, req.obstacles);

    let mut path: Vec<NodeId> = Vec::with_capacity(h + 1);
    let mut headings: Vec<Heading> = Vec::with_capacity(h);
    let mut poses: Vec<RobotPose> = Vec::with_capacity(h);
    let mut picks: Vec<usize> = vec![0; intents.len()];
    let mut baselines: HashMap<Vec<usize>, f64> = HashMap::new();

    for _ in 0..config.iterations {
        for (slot, intent) in picks.iter_mut().zip(&intents) {
            *slot = sample_index(&intent.candidates, rng);
        }

        // Selection with expansion-first.
        path.clear();
        let mut id = 0;
        path.push(id);
        while tree.nodes[id].depth < h {
            if !tree.nodes[id].untried.is_empty() {
                let heading = tree.nodes[id].untried.remove(0);
                let parent_pose = tree.nodes[id].pose;
                let pose = step(parent_pose, MotionPrimitive::new(heading, req.step_length), req.grid, req.obstacles)
                    .expect("untried primitives are pre-validated");
                let depth = tree.nodes[id].depth + 1;
                let untried = if depth < h {
                    valid_actions(pose, &config.actions, req.step_length, req.grid, req.obstacles)
                        .into_iter()
                        .map(|(a, _)| a)
                        .collect()
                } else {
                    Vec::new()
                };
                let child = tree.nodes.len();
                tree.nodes.push(TreeNode {
                    heading: Some(heading),
                    parent: Some(id),
                    depth,
                    pose,
                    children: Vec::new(),
                    untried,
                    visits: 0,
                    total: 0.0,
                });
                tree.nodes[id].children.push(child);
                id = child;
                path.push(id);
                break;
            }
            if tree.nodes[id].children.is_empty() {
                break;
            }
            id = tree.select_child(id, config.exploration);
            path.push(id);
        }

        // Rollout to the horizon.
        tree.prefix(id, &mut headings, &mut poses);
        let mut pose = tree.nodes[id].pose;
        while headings.len() < h {
            let (heading, next) = rollout_step(pose, req, config, cache, rng);
            headings.push(heading);
            poses.push(next);
            pose = next;
        }

        let mut team: Vec<TrajectoryView<'_>> = Vec::with_capacity(intents.len() + 1);
        team.push(TrajectoryView {
            scout_sensor: req.robot.scout_sensor.as_ref(),
            task_sensor: req.robot.task_sensor.as_ref(),
            poses: &poses,
        });
        for (intent, &k) in intents.iter().zip(&picks) {
            team.push(TrajectoryView {
                scout_sensor: intent.spec.scout_sensor.as_ref(),
                task_sensor: intent.spec.task_sensor.as_ref(),
                poses: &intent.candidates[k].0,
            });
        }
        let mut score = evaluator.score(cache, &team);
        if config.utility == Utility::Marginal && !intents.is_empty() {
            let without = match baselines.get(&picks) {
                Some(&v) => v,
                None => {
                    let v = evaluator.score(cache, &team[1..]);
                    baselines.insert(picks.clone(), v);
                    v
                }
            };
            score -= without;
        }
        tree.record(&path, &headings, score);
    }

    let best = tree.best_sequence();
    let objective = tree
        .complete
        .get(&best.headings())
        .map(|s| s.total / s.count as f64)
        .unwrap_or(0.0);
    let root = tree.nodes[0]
        .children
        .iter()
        .map(|&c| RootStat {
            heading: tree.nodes[c].heading.expect("child has a heading"),
            visits: tree.nodes[c].visits,
            mean: tree.nodes[c].mean(),
        })
        .collect();
    let distribution = compress_distribution(&tree, config, req.round);
    Ok(PlanOutcome {
        best,
        distribution,
        objective,
        root,
        tree,
    })
}

fn rollout_step<R: Rng + ?Sized>(
    pose: RobotPose,
    req: &PlanRequest<'_>,
    config: &PlannerConfig,
    cache: &mut FootprintCache,
    rng: &mut R,
) -> (Heading, RobotPose) {
    let options = valid_actions(pose, &config.actions, req.step_length, req.grid, req.obstacles);
    if options.is_empty() {
        return (Heading::Stay, pose);
    }
    match config.rollout {
        RolloutPolicy::Random => options[rng.gen_range(0..options.len())],
        RolloutPolicy::Greedy => {
            let Some(sensor) = req.robot.task_sensor.as_ref().or(req.robot.scout_sensor.as_ref()) else {
                return options[rng.gen_range(0..options.len())];
            };
            let probs = req.belief.probs().as_slice();
            let values: Vec<f64> = options
                .iter()
                .map(|(_, p)| {
                    cache
                        .get(p, sensor, req.grid, req.obstacles)
                        .iter()
                        .map(|&(k, v)| v * probs[k])
                        .sum()
                })
                .collect();
            let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ties: Vec<usize> = (0..options.len()).filter(|&k| values[k] >= best - 1e-12).collect();
            options[ties[rng.gen_range(0..ties.len())]]
        }
    }
}
