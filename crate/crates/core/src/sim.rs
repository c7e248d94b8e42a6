//! Episode runner: plan, move, sense, share, confirm, record.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::OccupancyBelief;
use crate::comms::{BusConfig, BusError, BusStats, MessageBus, MessageKind, Payload};
use crate::objective::{FootprintCache, ObjectiveMode};
use crate::planner::{
    plan_round, PlanDistribution, PlanRequest, PlannerConfig, PlannerError, PlannerTraceRecord, TeammateView,
};
use crate::rng::stream;
use crate::sensing::{footprint, sense, SensorSpec};
use crate::world::{step, ActionSequence, Cell, GroundTruth, GridSpec, RobotPose, RobotSpec, Scenario};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid episode config: {0}")]
    ConfigInvalid(String),
    #[error("robot {robot} at tick {tick}: {source}")]
    Planner {
        robot: usize,
        tick: u64,
        source: PlannerError,
    },
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub scenario: Scenario,
    pub planner: PlannerConfig,
    pub bus: BusConfig,
    pub max_ticks: u64,
    /// Primitives executed between planning rounds.
    pub replan_interval: usize,
    pub seed: u64,
    /// End as soon as every target is confirmed; otherwise run all ticks.
    pub stop_when_complete: bool,
    /// Task sensors also report what they see (including empty cells) to
    /// the belief, not only confirmations.
    pub fuse_task_readings: bool,
    /// Plan robots on the rayon pool. Results are identical either way.
    pub parallel: bool,
    pub record_planner_trace: bool,
    pub record_message_trace: bool,
}

impl EpisodeConfig {
    pub fn new(scenario: Scenario, planner: PlannerConfig, seed: u64) -> Self {
        Self {
            scenario,
            planner,
            bus: BusConfig::default(),
            max_ticks: 50,
            replan_interval: 1,
            seed,
            stop_when_complete: true,
            fuse_task_readings: true,
            parallel: false,
            record_planner_trace: false,
            record_message_trace: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| SimError::ConfigInvalid(m);
        self.scenario.validate().map_err(|e| bad(e.to_string()))?;
        self.planner.validate().map_err(|e| bad(e.to_string()))?;
        self.bus.validate().map_err(|e| bad(e.to_string()))?;
        if self.max_ticks < 1 {
            return Err(bad("max_ticks must be at least 1".into()));
        }
        if !(1..=self.planner.horizon).contains(&self.replan_interval) {
            return Err(bad(format!(
                "replan_interval must lie in [1, {}], got {}",
                self.planner.horizon, self.replan_interval
            )));
        }
        if self.bus.measurement_interval < 1 {
            return Err(bad("measurement_interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Warning for robots that expectimax cannot steer.
pub fn scout_only_warning(scenario: &Scenario, mode: ObjectiveMode) -> Option<String> {
    if mode != ObjectiveMode::Expectimax {
        return None;
    }
    let ids: Vec<String> = scenario
        .robots
        .iter()
        .filter(|r| r.is_scout_only())
        .map(|r| r.id.to_string())
        .collect();
    (!ids.is_empty()).then(|| {
        format!(
            "expectimax gives scout-only robots no gradient; robot(s) {} will not plan meaningfully",
            ids.join(", ")
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub confirmed: usize,
    pub robots: Vec<RobotState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub scenario: String,
    pub mode: ObjectiveMode,
    pub seed: u64,
    pub robot_ids: Vec<usize>,
    pub total_targets: usize,
    pub confirmed: usize,
    pub fraction_confirmed: f64,
    pub reward_per_distance: f64,
    pub total_distance: f64,
    pub ticks_run: u64,
    /// Tick at which the last target was confirmed.
    pub completion_tick: Option<u64>,
    pub ticks: Vec<TickRecord>,
    pub messages: BusStats,
}

impl EpisodeMetrics {
    pub fn distance_per_robot(&self) -> Vec<f64> {
        self.ticks
            .last()
            .map(|t| t.robots.iter().map(|r| r.distance).collect())
            .unwrap_or_else(|| vec![0.0; self.robot_ids.len()])
    }

    pub fn write_ticks_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "tick,confirmed")?;
        for id in &self.robot_ids {
            write!(out, ",r{id}_x,r{id}_y,r{id}_distance")?;
        }
        writeln!(out)?;
        for t in &self.ticks {
            write!(out, "{},{}", t.tick, t.confirmed)?;
            for r in &t.robots {
                write!(out, ",{:.6},{:.6},{:.6}", r.x, r.y, r.distance)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub const SUMMARY_HEADER: &'static str = "scenario,mode,seed,total_targets,confirmed,fraction_confirmed,reward_per_distance,total_distance,ticks_run,completion_tick,messages_sent,messages_dropped,messages_delivered";

    pub fn summary_row(&self) -> String {
        let m = self.messages.total();
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{},{},{},{},{}",
            self.scenario,
            self.mode,
            self.seed,
            self.total_targets,
            self.confirmed,
            self.fraction_confirmed,
            self.reward_per_distance,
            self.total_distance,
            self.ticks_run,
            self.completion_tick.map_or(String::new(), |t| t.to_string()),
            m.sent,
            m.dropped,
            m.delivered
        )
    }

    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{}", Self::SUMMARY_HEADER)?;
        writeln!(out, "{}", self.summary_row())
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub metrics: EpisodeMetrics,
    pub planner_trace: Vec<PlannerTraceRecord>,
    pub bus: MessageBus,
}

/// Adds every target seen by a task sensor at `poses` to `confirmed` and
/// returns the newly confirmed cells. Robots without a task sensor are ignored.
pub fn confirm_targets<R: Rng + ?Sized>(
    robots: &[(&RobotSpec, RobotPose)],
    grid: &GridSpec,
    truth: &GroundTruth,
    confirmed: &mut BTreeSet<Cell>,
    rng: &mut R,
) -> Vec<Cell> {
    let mut fresh = Vec::new();
    for (spec, pose) in robots {
        let Some(sensor) = spec.task_sensor.as_ref() else {
            continue;
        };
        for (k, p) in footprint(pose, sensor, grid, &truth.obstacles) {
            if p < 1.0 && rng.gen::<f64>() >= p {
                continue;
            }
            let cell = grid.cell_at(k);
            if truth.occupancy[cell] && confirmed.insert(cell) {
                fresh.push(cell);
            }
        }
    }
    fresh
}

const STREAM_PLAN: u64 = 1;
const STREAM_SENSE: u64 = 2;
const STREAM_CONFIRM: u64 = 3;
const STREAM_BUS: u64 = 4;

fn kind_tag(kind: MessageKind) -> u64 {
    match kind {
        MessageKind::PlanDistribution => 0,
        MessageKind::Measurement => 1,
        MessageKind::Confirmation => 2,
    }
}

struct Agent {
    spec: RobotSpec,
    pose: RobotPose,
    distance: f64,
    belief: OccupancyBelief,
    known_confirmed: BTreeSet<Cell>,
    plans: BTreeMap<usize, PlanDistribution>,
    /// Last reported pose of each teammate with its tick.
    poses: BTreeMap<usize, (u64, RobotPose)>,
    plan: ActionSequence,
    cursor: usize,
}

impl Agent {
    fn receive(&mut self, sender: usize, send_tick: u64, payload: &Payload) {
        let pose = payload.pose();
        let known = self.poses.entry(sender).or_insert((send_tick, pose));
        if send_tick >= known.0 {
            *known = (send_tick, pose);
        }
        match payload {
            Payload::PlanDistribution(d) => {
                if self.plans.get(&sender).is_none_or(|old| d.timestamp >= old.timestamp) {
                    self.plans.insert(sender, d.clone());
                }
            }
            Payload::Measurement { sensor, readings, .. } => {
                self.fuse(readings, sensor);
            }
            Payload::Confirmation { cells, .. } => {
                self.known_confirmed.extend(cells.iter().copied());
            }
        }
    }

    fn fuse(&mut self, readings: &crate::sensing::MeasurementGrid, sensor: &SensorSpec) {
        // Sensors are validated with the scenario, so fusion cannot fail.
        self.belief
            .fuse_in_place(readings, sensor)
            .expect("validated sensor and in-grid readings");
    }

    fn planning_belief(&self) -> OccupancyBelief {
        let mut b = self.belief.clone();
        for &c in &self.known_confirmed {
            let _ = b.set(c, 0.0);
        }
        b
    }
}

struct Planned {
    plan: ActionSequence,
    distribution: PlanDistribution,
    trace: Option<PlannerTraceRecord>,
}

fn plan_agent(
    idx: usize,
    agents: &[Agent],
    cache: &mut FootprintCache,
    config: &EpisodeConfig,
    tick: u64,
) -> Result<Planned, SimError> {
    let me = &agents[idx];
    let belief = me.planning_belief();
    let teammates: Vec<TeammateView<'_>> = agents
        .iter()
        .filter(|a| a.spec.id != me.spec.id)
        .map(|a| TeammateView {
            spec: &a.spec,
            pose: me.poses.get(&a.spec.id).map_or(a.spec.start_pose, |p| p.1),
            distribution: me.plans.get(&a.spec.id),
        })
        .collect();
    let req = PlanRequest {
        robot: &me.spec,
        pose: me.pose,
        belief: &belief,
        grid: &config.scenario.grid,
        obstacles: config.scenario.obstacles(),
        step_length: config.scenario.step_length,
        teammates: &teammates,
        round: tick,
    };
    let mut rng = stream(config.seed, &[STREAM_PLAN, tick, me.spec.id as u64]);
    match plan_round(&req, &config.planner, cache, &mut rng) {
        Ok(out) => Ok(Planned {
            trace: config.record_planner_trace.then(|| out.trace_record(tick)),
            plan: out.best,
            distribution: out.distribution,
        }),
        Err(PlannerError::NoValidAction { fallback }) => Ok(Planned {
            distribution: PlanDistribution {
                robot_id: me.spec.id,
                start_pose: me.pose,
                entries: vec![(fallback.clone(), 1.0)],
                timestamp: tick,
            },
            plan: fallback,
            trace: None,
        }),
        Err(source) => Err(SimError::Planner {
            robot: me.spec.id,
            tick,
            source,
        }),
    }
}

pub fn run_episode(config: &EpisodeConfig) -> Result<EpisodeOutput, SimError> {
    config.validate()?;
    let sc = &config.scenario;
    let grid = &sc.grid;
    let truth = &sc.ground_truth;
    let mode = config.planner.objective.mode;

    let mut robots = sc.robots.clone();
    robots.sort_by_key(|r| r.id);
    let prior = OccupancyBelief::uniform_prior(grid, sc.obstacles(), sc.prior)
        .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
    let mut agents: Vec<Agent> = robots
        .iter()
        .map(|r| Agent {
            spec: r.clone(),
            pose: r.start_pose,
            distance: 0.0,
            belief: prior.clone(),
            known_confirmed: BTreeSet::new(),
            plans: BTreeMap::new(),
            poses: robots.iter().filter(|o| o.id != r.id).map(|o| (o.id, (0, o.start_pose))).collect(),
            plan: ActionSequence::stay(r.id, 0),
            cursor: 0,
        })
        .collect();
    let mut caches: Vec<FootprintCache> = agents.iter().map(|_| FootprintCache::new()).collect();

    let mut bus = MessageBus::new(config.bus.clone(), robots.iter().map(|r| r.id))?;
    if config.record_message_trace {
        bus.enable_trace();
    }
    bus.update_positions(agents.iter().map(|a| (a.spec.id, a.pose)));

    let total_targets = truth.target_count();
    let mut confirmed: BTreeSet<Cell> = BTreeSet::new();
    let mut ticks = vec![TickRecord {
        tick: 0,
        confirmed: 0,
        robots: agents
            .iter()
            .map(|a| RobotState {
                x: a.pose.position.x,
                y: a.pose.position.y,
                distance: 0.0,
            })
            .collect(),
    }];
    let mut planner_trace = Vec::new();
    let mut completion_tick = None;
    let mut ticks_run = 0;

    let publish = |bus: &mut MessageBus, sender: usize, payload: Payload, tick: u64, slot: u64| {
        let tag = kind_tag(payload.kind());
        let mut rng = stream(config.seed, &[STREAM_BUS, tick, sender as u64, tag, slot]);
        bus.publish(sender, payload, tick, &mut rng)
    };

    for tick in 1..=config.max_ticks {
        if config.stop_when_complete && confirmed.len() == total_targets {
            break;
        }
        ticks_run = tick;

        // 1. Deliver and fuse.
        let inboxes = bus.deliver(tick);
        for agent in agents.iter_mut() {
            for msg in inboxes.get(&agent.spec.id).into_iter().flatten() {
                agent.receive(msg.sender, msg.send_tick, &msg.payload);
            }
        }

        // 2. Plan.
        if (tick - 1) % config.replan_interval as u64 == 0 {
            let planned: Vec<Result<Planned, SimError>> = if config.parallel {
                caches
                    .par_iter_mut()
                    .enumerate()
                    .map(|(i, cache)| plan_agent(i, &agents, cache, config, tick))
                    .collect()
            } else {
                caches
                    .iter_mut()
                    .enumerate()
                    .map(|(i, cache)| plan_agent(i, &agents, cache, config, tick))
                    .collect()
            };
            for (agent, planned) in agents.iter_mut().zip(planned) {
                let planned = planned?;
                agent.plan = planned.plan;
                agent.cursor = 0;
                planner_trace.extend(planned.trace);
                publish(&mut bus, agent.spec.id, Payload::PlanDistribution(planned.distribution), tick, 0)?;
            }
        }

        // 3. Execute one primitive.
        for agent in agents.iter_mut() {
            if let Some(&prim) = agent.plan.primitives.get(agent.cursor) {
                if let Ok(next) = step(agent.pose, prim, grid, sc.obstacles()) {
                    agent.pose = next;
                    agent.distance += prim.length();
                }
            }
            agent.cursor += 1;
        }
        bus.update_positions(agents.iter().map(|a| (a.spec.id, a.pose)));

        // 4. Sense, confirm and share.
        for agent in agents.iter_mut() {
            let id = agent.spec.id;
            let task_readings = agent.spec.task_sensor.filter(|_| config.fuse_task_readings);
            for (slot, sensor) in [agent.spec.scout_sensor, task_readings].into_iter().enumerate() {
                let Some(sensor) = sensor else { continue };
                let mut rng = stream(config.seed, &[STREAM_SENSE, tick, id as u64, slot as u64]);
                let readings = sense(&agent.pose, &sensor, grid, truth, &mut rng);
                agent.fuse(&readings, &sensor);
                if tick % config.bus.measurement_interval == 0 {
                    let payload = Payload::Measurement {
                        pose: agent.pose,
                        sensor,
                        readings,
                    };
                    publish(&mut bus, id, payload, tick, slot as u64)?;
                }
            }
            if agent.spec.is_task() {
                let mut rng = stream(config.seed, &[STREAM_CONFIRM, tick, id as u64]);
                // Targets already known to this robot are not re-reported.
                let fresh = confirm_targets(
                    &[(&agent.spec, agent.pose)],
                    grid,
                    truth,
                    &mut agent.known_confirmed,
                    &mut rng,
                );
                if !fresh.is_empty() {
                    confirmed.extend(fresh.iter().copied());
                    let payload = Payload::Confirmation {
                        pose: agent.pose,
                        cells: fresh,
                    };
                    publish(&mut bus, id, payload, tick, 0)?;
                }
            }
        }

        // 5. Record.
        ticks.push(TickRecord {
            tick,
            confirmed: confirmed.len(),
            robots: agents
                .iter()
                .map(|a| RobotState {
                    x: a.pose.position.x,
                    y: a.pose.position.y,
                    distance: a.distance,
                })
                .collect(),
        });
        if completion_tick.is_none() && total_targets > 0 && confirmed.len() == total_targets {
            completion_tick = Some(tick);
        }
    }

    let total_distance: f64 = agents.iter().map(|a| a.distance).sum();
    let fraction_confirmed = if total_targets == 0 {
        1.0
    } else {
        confirmed.len() as f64 / total_targets as f64
    };
    let reward_per_distance = if total_distance > 0.0 {
        confirmed.len() as f64 / total_distance
    } else {
        0.0
    };
    let metrics = EpisodeMetrics {
        scenario: sc.name.clone(),
        mode,
        seed: config.seed,
        robot_ids: agents.iter().map(|a| a.spec.id).collect(),
        total_targets,
        confirmed: confirmed.len(),
        fraction_confirmed,
        reward_per_distance,
        total_distance,
        ticks_run,
        completion_tick,
        ticks,
        messages: bus.stats().clone(),
    };
    Ok(EpisodeOutput {
        metrics,
        planner_trace,
        bus,
    })
}
