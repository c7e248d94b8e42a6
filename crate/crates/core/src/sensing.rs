//! Per-cell Bernoulli visibility with line of sight, measurement sampling
//! and the confusion-matrix sensor model.

use std::ops::ControlFlow;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{walk_segment, Cell, CellMap, GridSpec, GroundTruth, ObstacleMap, Point, RobotPose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensorError {
    #[error("sensor range must be positive, got {0}")]
    Range(f64),
    #[error("{name} must lie in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("true positive rate {tpr} is below false positive rate {fpr}")]
    Uninformative { tpr: f64, fpr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    /// Metres, measured from the robot to cell centres.
    pub range: f64,
    pub p_visible: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
    /// Permits `true_positive_rate < false_positive_rate`.
    #[serde(default)]
    pub allow_inverted: bool,
}

impl SensorSpec {
    pub fn new(range: f64, p_visible: f64, tpr: f64, fpr: f64) -> Self {
        Self {
            range,
            p_visible,
            true_positive_rate: tpr,
            false_positive_rate: fpr,
            allow_inverted: false,
        }
    }

    /// Short-range payload sensor: two cells, perfect detection.
    pub fn default_task(cell_size: f64) -> Self {
        Self::new(2.0 * cell_size, 1.0, 1.0, 0.0)
    }

    /// Long-range low-fidelity sensor: eight cells, noisy detection.
    pub fn default_scout(cell_size: f64) -> Self {
        Self::new(8.0 * cell_size, 1.0, 0.9, 0.05)
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(SensorError::Range(self.range));
        }
        for (name, value) in [
            ("p_visible", self.p_visible),
            ("true_positive_rate", self.true_positive_rate),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SensorError::Probability { name, value });
            }
        }
        if !self.allow_inverted && self.true_positive_rate < self.false_positive_rate {
            return Err(SensorError::Uninformative {
                tpr: self.true_positive_rate,
                fpr: self.false_positive_rate,
            });
        }
        Ok(())
    }
}

/// Per-cell visibility probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMask {
    pub probabilities: CellMap<f64>,
}

impl VisibilityMask {
    pub fn empty(grid: &GridSpec) -> Self {
        Self {
            probabilities: CellMap::filled(grid, 0.0),
        }
    }

    pub fn visible_cells(&self) -> impl Iterator<Item = (Cell, f64)> + '_ {
        self.probabilities
            .iter()
            .filter(|(_, &p)| p > 0.0)
            .map(|(c, &p)| (c, p))
    }
}

/// Sparse single-pose visibility: `(dense cell index, probability)` pairs
/// with positive probability, in ascending index order.
pub type Footprint = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasurementGrid {
    /// Observed cells and their readings, in ascending cell order.
    pub readings: Vec<(Cell, bool)>,
}

impl MeasurementGrid {
    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn observed(&self) -> impl Iterator<Item = Cell> + '_ {
        self.readings.iter().map(|(c, _)| *c)
    }
}

/// True iff no obstacle cell other than the endpoint cells is crossed by `a -> b`.
pub fn line_of_sight(a: Point, b: Point, obstacles: &ObstacleMap, grid: &GridSpec) -> bool {
    // Canonical order keeps the traversal, and so the answer, symmetric.
    let (a, b) = if (a.x, a.y) <= (b.x, b.y) { (a, b) } else { (b, a) };
    let (Ok(ca), Ok(cb)) = (grid.cell_of(a), grid.cell_of(b)) else {
        return false;
    };
    let mut clear = true;
    walk_segment(grid, a, b, |c| {
        if c != ca && c != cb && obstacles[c] {
            clear = false;
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    });
    clear
}

pub fn footprint(
    pose: &RobotPose,
    sensor: &SensorSpec,
    grid: &GridSpec,
    obstacles: &ObstacleMap,
) -> Footprint {
    let mut out = Vec::new();
    if sensor.p_visible <= 0.0 {
        return out;
    }
    let cs = grid.cell_size;
    let p = pose.position;
    let reach = sensor.range / cs;
    let lo = |v: f64| ((v / cs - reach - 1.0).floor().max(0.0)) as usize;
    let hi = |v: f64, n: usize| ((v / cs + reach + 1.0).ceil().max(0.0) as usize).min(n);
    let range_sq = sensor.range * sensor.range * (1.0 + 1e-12);
    for i in lo(p.x)..hi(p.x, grid.n_x) {
        for j in lo(p.y)..hi(p.y, grid.n_y) {
            let cell = Cell::new(i, j);
            let center = grid.cell_center(cell);
            let (dx, dy) = (center.x - p.x, center.y - p.y);
            if dx * dx + dy * dy > range_sq {
                continue;
            }
            if line_of_sight(p, center, obstacles, grid) {
                out.push((grid.index(cell), sensor.p_visible));
            }
        }
    }
    out
}

pub fn visibility_single(
    pose: &RobotPose,
    sensor: &SensorSpec,
    grid: &GridSpec,
    obstacles: &ObstacleMap,
) -> VisibilityMask {
    let mut mask = VisibilityMask::empty(grid);
    let probs = mask.probabilities.as_mut_slice();
    for (k, p) in footprint(pose, sensor, grid, obstacles) {
        probs[k] = p;
    }
    mask
}

/// Disjunction of visibility over every pose of every listed trajectory:
/// `P(v) = 1 - prod(1 - p_single)`.
pub fn visibility_trajectory(
    trajectories: &[(&[RobotPose], &SensorSpec)],
    grid: &GridSpec,
    obstacles: &ObstacleMap,
) -> VisibilityMask {
    let mut miss = vec![1.0f64; grid.num_cells()];
    for (poses, sensor) in trajectories {
        for pose in poses.iter() {
            for (k, p) in footprint(pose, sensor, grid, obstacles) {
                miss[k] *= 1.0 - p;
            }
        }
    }
    let probs = miss.into_iter().map(|m| 1.0 - m).collect();
    VisibilityMask {
        probabilities: CellMap::from_vec(grid, probs).expect("shape matches grid"),
    }
}

/// Samples one measurement: each cell is observed with its visibility
/// probability and reads occupied with the confusion-matrix rate.
pub fn sense<R: Rng + ?Sized>(
    pose: &RobotPose,
    sensor: &SensorSpec,
    grid: &GridSpec,
    truth: &GroundTruth,
    rng: &mut R,
) -> MeasurementGrid {
    let mut readings = Vec::new();
    for (k, p) in footprint(pose, sensor, grid, &truth.obstacles) {
        if p < 1.0 && rng.gen::<f64>() >= p {
            continue;
        }
        let cell = grid.cell_at(k);
        let rate = if truth.occupancy[cell] {
            sensor.true_positive_rate
        } else {
            sensor.false_positive_rate
        };
        readings.push((cell, rng.gen::<f64>() < rate));
    }
    MeasurementGrid { readings }
}
