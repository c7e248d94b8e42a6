//! Discrete-tick message bus with per-kind drop probability, configurable
//! delay and connectivity.
//!
//! Multi-hop routing is modelled as reachability over the adjacency graph at
//! the send tick; there is no relaying state.

use std::collections::{BTreeMap, VecDeque};
use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::PlanDistribution;
use crate::sensing::{MeasurementGrid, SensorSpec};
use crate::world::{Cell, RobotPose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("drop probability for {kind} must lie in [0, 1], got {value}")]
    DropProbability { kind: MessageKind, value: f64 },
    #[error("range radius must be positive, got {0}")]
    Radius(f64),
    #[error("unknown robot {0}")]
    UnknownRobot(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    PlanDistribution,
    Measurement,
    Confirmation,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::PlanDistribution => "PLAN_DISTRIBUTION",
            MessageKind::Measurement => "MEASUREMENT",
            MessageKind::Confirmation => "CONFIRMATION",
        }
    }
}

impl std::fmt::Display for MessageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    PlanDistribution(PlanDistribution),
    Measurement {
        pose: RobotPose,
        sensor: SensorSpec,
        readings: MeasurementGrid,
    },
    Confirmation {
        pose: RobotPose,
        cells: Vec<Cell>,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::PlanDistribution(_) => MessageKind::PlanDistribution,
            Payload::Measurement { .. } => MessageKind::Measurement,
            Payload::Confirmation { .. } => MessageKind::Confirmation,
        }
    }

    /// Sender pose carried by the payload.
    pub fn pose(&self) -> RobotPose {
        match self {
            Payload::PlanDistribution(d) => d.start_pose,
            Payload::Measurement { pose, .. } | Payload::Confirmation { pose, .. } => *pose,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: usize,
    pub payload: Arc<Payload>,
    pub send_tick: u64,
    pub deliver_tick: u64,
    /// Bus-wide publish counter, the final ordering key.
    pub sequence: u64,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropProbabilities {
    #[serde(default)]
    pub plan_distribution: f64,
    #[serde(default)]
    pub measurement: f64,
    #[serde(default)]
    pub confirmation: f64,
}

impl DropProbabilities {
    pub fn get(&self, kind: MessageKind) -> f64 {
        match kind {
            MessageKind::PlanDistribution => self.plan_distribution,
            MessageKind::Measurement => self.measurement,
            MessageKind::Confirmation => self.confirmation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Adjacency {
    #[default]
    Full,
    /// Robots within `radius` metres are linked.
    Range { radius: f64 },
    /// Undirected links between robot ids.
    Explicit { edges: Vec<(usize, usize)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDelay {
    pub from: usize,
    pub to: usize,
    pub ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusConfig {
    #[serde(default)]
    pub delay_ticks: u64,
    #[serde(default)]
    pub link_delays: Vec<LinkDelay>,
    #[serde(default)]
    pub drop_probability: DropProbabilities,
    #[serde(default)]
    pub adjacency: Adjacency,
    /// Publish measurements every this many ticks.
    #[serde(default = "default_interval")]
    pub measurement_interval: u64,
}

fn default_interval() -> u64 {
    1
}

impl Default for BusConfig {
    fn default() -> Self {
        Self {
            delay_ticks: 0,
            link_delays: Vec::new(),
            drop_probability: DropProbabilities::default(),
            adjacency: Adjacency::Full,
            measurement_interval: default_interval(),
        }
    }
}

impl BusConfig {
    pub fn validate(&self) -> Result<(), BusError> {
        for kind in [MessageKind::PlanDistribution, MessageKind::Measurement, MessageKind::Confirmation] {
            let value = self.drop_probability.get(kind);
            if !(0.0..=1.0).contains(&value) {
                return Err(BusError::DropProbability { kind, value });
            }
        }
        if let Adjacency::Range { radius } = self.adjacency {
            if radius.is_nan() || radius <= 0.0 {
                return Err(BusError::Radius(radius));
            }
        }
        Ok(())
    }

    pub fn delay(&self, from: usize, to: usize) -> u64 {
        self.link_delays
            .iter()
            .find(|l| l.from == from && l.to == to)
            .map_or(self.delay_ticks, |l| l.ticks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub sender: usize,
    pub receiver: usize,
    pub kind: MessageKind,
    pub dropped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KindCounts {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BusStats {
    pub per_kind: BTreeMap<MessageKind, KindCounts>,
}

impl BusStats {
    pub fn total(&self) -> KindCounts {
        self.per_kind.values().fold(KindCounts::default(), |acc, c| KindCounts {
            sent: acc.sent + c.sent,
            dropped: acc.dropped + c.dropped,
            delivered: acc.delivered + c.delivered,
        })
    }
}

#[derive(Debug, Clone)]
struct Pending {
    deliver_tick: u64,
    sender: usize,
    sequence: u64,
    receiver: usize,
    message: Message,
}

pub type Inboxes = BTreeMap<usize, Vec<Message>>;

#[derive(Debug, Clone)]
pub struct MessageBus {
    config: BusConfig,
    robots: Vec<usize>,
    positions: BTreeMap<usize, RobotPose>,
    pending: Vec<Pending>,
    next_sequence: u64,
    stats: BusStats,
    trace: Option<Vec<TraceRecord>>,
}

impl MessageBus {
    pub fn new(config: BusConfig, robots: impl IntoIterator<Item = usize>) -> Result<Self, BusError> {
        config.validate()?;
        let mut robots: Vec<usize> = robots.into_iter().collect();
        robots.sort_unstable();
        robots.dedup();
        Ok(Self {
            config,
            robots,
            positions: BTreeMap::new(),
            pending: Vec::new(),
            next_sequence: 0,
            stats: BusStats::default(),
            trace: None,
        })
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    pub fn write_trace<W: Write>(&self, mut out: W) -> io::Result<()> {
        for rec in self.trace.iter().flatten() {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn stats(&self) -> &BusStats {
        &self.stats
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Positions used by range-limited adjacency.
    pub fn update_positions(&mut self, positions: impl IntoIterator<Item = (usize, RobotPose)>) {
        self.positions.extend(positions);
    }

    fn linked(&self, a: usize, b: usize) -> bool {
        match &self.config.adjacency {
            Adjacency::Full => true,
            Adjacency::Range { radius } => match (self.positions.get(&a), self.positions.get(&b)) {
                (Some(pa), Some(pb)) => pa.position.distance(&pb.position) <= *radius,
                _ => false,
            },
            Adjacency::Explicit { edges } => edges.iter().any(|&(x, y)| (x, y) == (a, b) || (y, x) == (a, b)),
        }
    }

    /// Robots reachable from `sender` over any number of hops, excluding the sender.
    pub fn reachable(&self, sender: usize) -> Vec<usize> {
        let mut seen = BTreeMap::new();
        seen.insert(sender, ());
        let mut queue = VecDeque::from([sender]);
        while let Some(a) = queue.pop_front() {
            for &b in &self.robots {
                if !seen.contains_key(&b) && self.linked(a, b) {
                    seen.insert(b, ());
                    queue.push_back(b);
                }
            }
        }
        seen.into_keys().filter(|&r| r != sender).collect()
    }

    /// Enqueues `payload` for every robot reachable from `sender`, dropping each
    /// copy independently with the kind's drop probability.
    pub fn publish<R: Rng + ?Sized>(
        &mut self,
        sender: usize,
        payload: Payload,
        tick: u64,
        rng: &mut R,
    ) -> Result<(), BusError> {
        if self.robots.binary_search(&sender).is_err() {
            return Err(BusError::UnknownRobot(sender));
        }
        let kind = payload.kind();
        let payload = Arc::new(payload);
        let drop_p = self.config.drop_probability.get(kind);
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        for receiver in self.reachable(sender) {
            let dropped = drop_p > 0.0 && rng.gen::<f64>() < drop_p;
            let counts = self.stats.per_kind.entry(kind).or_default();
            counts.sent += 1;
            if let Some(trace) = self.trace.as_mut() {
                trace.push(TraceRecord {
                    tick,
                    sender,
                    receiver,
                    kind,
                    dropped,
                });
            }
            if dropped {
                counts.dropped += 1;
                continue;
            }
            let deliver_tick = tick + self.config.delay(sender, receiver);
            self.pending.push(Pending {
                deliver_tick,
                sender,
                sequence,
                receiver,
                message: Message {
                    sender,
                    payload: Arc::clone(&payload),
                    send_tick: tick,
                    deliver_tick,
                    sequence,
                },
            });
        }
        Ok(())
    }

    /// Removes and returns every message due by `tick`, per receiver, in
    /// `(deliver_tick, sender, sequence)` order.
    pub fn deliver(&mut self, tick: u64) -> Inboxes {
        let (mut due, rest): (Vec<Pending>, Vec<Pending>) =
            std::mem::take(&mut self.pending).into_iter().partition(|p| p.deliver_tick <= tick);
        self.pending = rest;
        due.sort_by_key(|p| (p.deliver_tick, p.sender, p.sequence));
        let mut inboxes: Inboxes = self.robots.iter().map(|&r| (r, Vec::new())).collect();
        for p in due {
            self.stats.per_kind.entry(p.message.kind()).or_default().delivered += 1;
            inboxes.entry(p.receiver).or_default().push(p.message);
        }
        inboxes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn confirmation(x: f64) -> Payload {
        Payload::Confirmation {
            pose: RobotPose::new(x, 0.0),
            cells: vec![],
        }
    }

    fn bus(config: BusConfig) -> MessageBus {
        MessageBus::new(config, [0, 1, 2]).unwrap()
    }

    #[test]
    fn certain_drop_delivers_nothing() {
        let mut b = bus(BusConfig {
            drop_probability: DropProbabilities {
                confirmation: 1.0,
                ..Default::default()
            },
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.publish(0, confirmation(0.0), 0, &mut rng).unwrap();
        assert!(b.deliver(10).values().all(Vec::is_empty));
        assert_eq!(b.stats().per_kind[&MessageKind::Confirmation].dropped, 2);
    }

    #[test]
    fn full_adjacency_reaches_everyone_same_tick() {
        let mut b = bus(BusConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.publish(0, confirmation(0.0), 4, &mut rng).unwrap();
        let inbox = b.deliver(4);
        assert!(inbox[&0].is_empty());
        assert_eq!(inbox[&1].len() + inbox[&2].len(), 2);
        assert!(inbox[&1][0].deliver_tick == 4 && inbox[&2][0].deliver_tick == 4);
    }

    #[test]
    fn isolated_robot_receives_nothing() {
        let mut b = bus(BusConfig {
            adjacency: Adjacency::Range { radius: 5.0 },
            ..Default::default()
        });
        b.update_positions([
            (0, RobotPose::new(0.0, 0.0)),
            (1, RobotPose::new(4.0, 0.0)),
            (2, RobotPose::new(40.0, 0.0)),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.publish(0, confirmation(0.0), 0, &mut rng).unwrap();
        let inbox = b.deliver(0);
        assert_eq!(inbox[&1].len(), 1);
        assert!(inbox[&2].is_empty());
    }

    #[test]
    fn multi_hop_reachability() {
        let mut b = bus(BusConfig {
            adjacency: Adjacency::Range { radius: 5.0 },
            ..Default::default()
        });
        b.update_positions([
            (0, RobotPose::new(0.0, 0.0)),
            (1, RobotPose::new(4.0, 0.0)),
            (2, RobotPose::new(8.0, 0.0)),
        ]);
        assert_eq!(b.reachable(0), vec![1, 2]);
        let b = bus(BusConfig {
            adjacency: Adjacency::Explicit { edges: vec![(1, 2)] },
            ..Default::default()
        });
        assert!(b.reachable(0).is_empty());
        assert_eq!(b.reachable(2), vec![1]);
    }

    #[test]
    fn empty_bus_and_delay() {
        let mut b = bus(BusConfig {
            delay_ticks: 2,
            ..Default::default()
        });
        assert!(b.deliver(0).values().all(Vec::is_empty));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.publish(1, confirmation(1.0), 3, &mut rng).unwrap();
        assert!(b.deliver(4).values().all(Vec::is_empty));
        let inbox = b.deliver(5);
        assert_eq!(inbox[&0].len(), 1);
        assert_eq!(inbox[&0][0].send_tick, 3);
    }

    #[test]
    fn same_tick_ordered_by_sender() {
        let mut b = bus(BusConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.publish(2, confirmation(2.0), 0, &mut rng).unwrap();
        b.publish(1, confirmation(1.0), 0, &mut rng).unwrap();
        let inbox = b.deliver(0);
        let senders: Vec<usize> = inbox[&0].iter().map(|m| m.sender).collect();
        assert_eq!(senders, vec![1, 2]);
    }

    #[test]
    fn per_link_delay_override() {
        let mut b = bus(BusConfig {
            delay_ticks: 1,
            link_delays: vec![LinkDelay { from: 0, to: 2, ticks: 3 }],
            ..Default::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.publish(0, confirmation(0.0), 0, &mut rng).unwrap();
        let first = b.deliver(1);
        assert_eq!(first[&1].len(), 1);
        assert!(first[&2].is_empty());
        assert_eq!(b.deliver(3)[&2].len(), 1);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = BusConfig {
            drop_probability: DropProbabilities {
                measurement: 1.5,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(MessageBus::new(cfg, [0]).is_err());
        let mut b = bus(BusConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(b.publish(9, confirmation(0.0), 0, &mut rng), Err(BusError::UnknownRobot(9)));
    }

    proptest! {
        #[test]
        fn exactly_once_fifo_and_deterministic(
            schedule in proptest::collection::vec((0usize..3, 0u64..4), 1..40),
            drop in 0.0f64..0.6,
            delay in 0u64..3,
            seed: u64,
        ) {
            let run = || {
                let mut b = bus(BusConfig {
                    delay_ticks: delay,
                    drop_probability: DropProbabilities { confirmation: drop, ..Default::default() },
                    ..Default::default()
                });
                b.enable_trace();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut delivered = Vec::new();
                let mut tick = 0;
                for (k, &(sender, gap)) in schedule.iter().enumerate() {
                    tick += gap;
                    for (r, msgs) in b.deliver(tick) {
                        delivered.extend(msgs.into_iter().map(|m| (r, m.sender, m.sequence)));
                    }
                    b.publish(sender, confirmation(k as f64), tick, &mut rng).unwrap();
                }
                for (r, msgs) in b.deliver(u64::MAX) {
                    delivered.extend(msgs.into_iter().map(|m| (r, m.sender, m.sequence)));
                }
                (delivered, b.trace().unwrap().to_vec(), b.stats().clone())
            };
            let (delivered, trace, stats) = run();
            let kept = trace.iter().filter(|t| !t.dropped).count();
            prop_assert_eq!(delivered.len(), kept);
            prop_assert_eq!(stats.total().delivered as usize, kept);
            let mut uniq = delivered.clone();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), delivered.len());
            // FIFO per (sender, receiver).
            for r in 0..3 {
                for s in 0..3 {
                    let seqs: Vec<u64> = delivered.iter().filter(|d| d.0 == r && d.1 == s).map(|d| d.2).collect();
                    prop_assert!(seqs.windows(2).all(|w| w[0] < w[1]));
                }
            }
            prop_assert_eq!(run().0, delivered);
        }
    }
}
