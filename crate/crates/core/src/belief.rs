//! Factorised Bernoulli occupancy belief, Bayesian fusion and information gain.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensing::{footprint, MeasurementGrid, SensorSpec};
use crate::world::{Cell, CellMap, GridSpec, ObstacleMap, RobotPose};

/// Beliefs are clamped to `[EPSILON, 1 - EPSILON]` before every fusion.
pub const EPSILON: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("prior probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("reading at ({}, {}) has zero likelihood under the sensor model", .0.i, .0.j)]
    DegenerateLikelihood(Cell),
    #[error("cell ({}, {}) lies outside the belief grid", .0.i, .0.j)]
    OutOfGrid(Cell),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyBelief {
    grid: GridSpec,
    probs: CellMap<f64>,
    obstacles: ObstacleMap,
}

impl OccupancyBelief {
    pub fn uniform_prior(grid: &GridSpec, obstacles: &ObstacleMap, p0: f64) -> Result<Self, BeliefError> {
        if !(0.0..=1.0).contains(&p0) {
            return Err(BeliefError::InvalidProbability(p0));
        }
        let mut probs = CellMap::filled(grid, p0);
        for (c, &blocked) in obstacles.iter() {
            if blocked {
                probs[c] = 0.0;
            }
        }
        Ok(Self {
            grid: *grid,
            probs,
            obstacles: obstacles.clone(),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn obstacles(&self) -> &ObstacleMap {
        &self.obstacles
    }

    pub fn get(&self, cell: Cell) -> f64 {
        self.probs[cell]
    }

    pub fn probs(&self) -> &CellMap<f64> {
        &self.probs
    }

    /// Overrides a free cell's probability; obstacle cells stay at zero.
    pub fn set(&mut self, cell: Cell, p: f64) -> Result<(), BeliefError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(BeliefError::InvalidProbability(p));
        }
        if !self.obstacles[cell] {
            self.probs[cell] = p;
        }
        Ok(())
    }

    /// Bayes update of every observed cell; unobserved cells are unchanged.
    pub fn fuse(&self, measurement: &MeasurementGrid, sensor: &SensorSpec) -> Result<Self, BeliefError> {
        let mut next = self.clone();
        next.fuse_in_place(measurement, sensor)?;
        Ok(next)
    }

    /// In-place form of [`fuse`](Self::fuse). On error the belief is unchanged.
    pub fn fuse_in_place(&mut self, measurement: &MeasurementGrid, sensor: &SensorSpec) -> Result<(), BeliefError> {
        let mut updates = Vec::with_capacity(measurement.len());
        for &(cell, occupied) in &measurement.readings {
            if cell.i >= self.grid.n_x || cell.j >= self.grid.n_y {
                return Err(BeliefError::OutOfGrid(cell));
            }
            if self.obstacles[cell] {
                continue;
            }
            let prior = self.probs[cell].clamp(EPSILON, 1.0 - EPSILON);
            let post = bayes_update(prior, occupied, sensor)
                .ok_or(BeliefError::DegenerateLikelihood(cell))?;
            updates.push((cell, post));
        }
        for (cell, p) in updates {
            self.probs[cell] = p;
        }
        Ok(())
    }

    /// Dense CSV dump: one line per `j` (row), `n_x` columns, six decimals.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for j in 0..self.grid.n_y {
            let row: Vec<String> = (0..self.grid.n_x)
                .map(|i| format!("{:.6}", self.probs[Cell::new(i, j)]))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Posterior occupancy after one reading. `None` when the reading is
/// impossible under the sensor model.
pub fn bayes_update(prior: f64, occupied: bool, sensor: &SensorSpec) -> Option<f64> {
    let (tpr, fpr) = (sensor.true_positive_rate, sensor.false_positive_rate);
    let (l1, l0) = if occupied { (tpr, fpr) } else { (1.0 - tpr, 1.0 - fpr) };
    let num = l1 * prior;
    let den = num + l0 * (1.0 - prior);
    (den > 0.0).then(|| num / den)
}

fn entropy_with(p: f64, log: impl Fn(f64) -> f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * log(q) };
    term(p) + term(1.0 - p)
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    entropy_with(p, f64::log2)
}

pub fn binary_entropy_nats(p: f64) -> f64 {
    entropy_with(p, f64::ln)
}

fn information_gain_with(p: f64, sensor: &SensorSpec, h: impl Fn(f64) -> f64) -> f64 {
    let (tpr, fpr) = (sensor.true_positive_rate, sensor.false_positive_rate);
    let p_occupied_reading = p * tpr + (1.0 - p) * fpr;
    (h(p_occupied_reading) - (p * h(tpr) + (1.0 - p) * h(fpr))).max(0.0)
}

/// Mutual information between a cell's occupancy and one reading, in bits.
pub fn cell_information_gain(p: f64, sensor: &SensorSpec) -> f64 {
    information_gain_with(p, sensor, binary_entropy)
}

pub fn cell_information_gain_nats(p: f64, sensor: &SensorSpec) -> f64 {
    information_gain_with(p, sensor, binary_entropy_nats)
}

/// Information gain of the scouts' planned poses in nats. Each cell counts
/// once, weighted by its disjunction visibility; where sensors differ the
/// most informative one covering the cell is used.
pub fn trajectory_information_gain_nats(
    belief: &OccupancyBelief,
    scouts: &[(&[RobotPose], &SensorSpec)],
    grid: &GridSpec,
    obstacles: &ObstacleMap,
) -> f64 {
    let n = grid.num_cells();
    let mut miss = vec![1.0f64; n];
    let mut gain = vec![0.0f64; n];
    let probs = belief.probs.as_slice();
    for (poses, sensor) in scouts {
        for pose in poses.iter() {
            for (k, p) in footprint(pose, sensor, grid, obstacles) {
                miss[k] *= 1.0 - p;
                let g = cell_information_gain_nats(probs[k], sensor);
                if g > gain[k] {
                    gain[k] = g;
                }
            }
        }
    }
    miss.iter().zip(&gain).map(|(m, g)| (1.0 - m) * g).sum()
}

/// Bits version of [`trajectory_information_gain_nats`].
pub fn trajectory_information_gain(
    belief: &OccupancyBelief,
    scouts: &[(&[RobotPose], &SensorSpec)],
    grid: &GridSpec,
    obstacles: &ObstacleMap,
) -> f64 {
    trajectory_information_gain_nats(belief, scouts, grid, obstacles) / std::f64::consts::LN_2
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid2() -> (GridSpec, ObstacleMap) {
        let g = GridSpec::new(2, 2, 1.0).unwrap();
        let o = ObstacleMap::filled(&g, false);
        (g, o)
    }

    /// Posterior from the explicit 2x2 joint over (E, y).
    fn enumerate_posterior(p: f64, tpr: f64, fpr: f64, occupied: bool) -> f64 {
        let like = |e: bool| {
            let r = if e { tpr } else { fpr };
            if occupied { r } else { 1.0 - r }
        };
        let joint = [(false, (1.0 - p) * like(false)), (true, p * like(true))];
        let total: f64 = joint.iter().map(|(_, w)| w).sum();
        joint.iter().filter(|(e, _)| *e).map(|(_, w)| w).sum::<f64>() / total
    }

    /// Mutual information summed directly over the 2x2 joint table.
    fn enumerate_mi_bits(p: f64, tpr: f64, fpr: f64) -> f64 {
        let mut mi = 0.0;
        for e in [false, true] {
            let pe = if e { p } else { 1.0 - p };
            let rate = if e { tpr } else { fpr };
            for y in [false, true] {
                let py_e = if y { rate } else { 1.0 - rate };
                let py = if y { p * tpr + (1.0 - p) * fpr } else { 1.0 - (p * tpr + (1.0 - p) * fpr) };
                let joint = pe * py_e;
                if joint > 0.0 {
                    mi += joint * (joint / (pe * py)).log2();
                }
            }
        }
        mi
    }

    #[test]
    fn uniform_prior_examples() {
        let (g, o) = grid2();
        let b = OccupancyBelief::uniform_prior(&g, &o, 0.5).unwrap();
        assert!(b.probs().as_slice().iter().all(|&p| p == 0.5));
        let b = OccupancyBelief::uniform_prior(&g, &o, 0.0).unwrap();
        assert!(b.probs().as_slice().iter().all(|&p| p == 0.0));
        let o = ObstacleMap::from_cells(&g, [Cell::new(1, 0)]);
        let b = OccupancyBelief::uniform_prior(&g, &o, 0.3).unwrap();
        assert_eq!(b.get(Cell::new(1, 0)), 0.0);
        assert_eq!(b.get(Cell::new(0, 1)), 0.3);
        assert!(OccupancyBelief::uniform_prior(&g, &o, 1.2).is_err());
    }

    #[test]
    fn fuse_examples() {
        let (g, o) = grid2();
        let b = OccupancyBelief::uniform_prior(&g, &o, 0.5).unwrap();
        let m = MeasurementGrid {
            readings: vec![(Cell::new(0, 0), true)],
        };
        let flat = SensorSpec::new(1.0, 1.0, 0.4, 0.4);
        assert!((b.fuse(&m, &flat).unwrap().get(Cell::new(0, 0)) - 0.5).abs() < 1e-15);
        let s = SensorSpec::new(1.0, 1.0, 0.9, 0.1);
        let post = b.fuse(&m, &s).unwrap();
        assert!((post.get(Cell::new(0, 0)) - 0.9).abs() < 1e-12);
        assert_eq!(post.get(Cell::new(1, 1)), 0.5);
        assert_eq!(b.fuse(&MeasurementGrid::default(), &s).unwrap(), b);
    }

    #[test]
    fn degenerate_prior_is_clamped() {
        let (g, o) = grid2();
        let b = OccupancyBelief::uniform_prior(&g, &o, 0.0).unwrap();
        let perfect = SensorSpec::new(1.0, 1.0, 1.0, 0.0);
        let m = MeasurementGrid {
            readings: vec![(Cell::new(0, 0), true)],
        };
        assert_eq!(b.fuse(&m, &perfect).unwrap().get(Cell::new(0, 0)), 1.0);
        let blind = SensorSpec::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(
            b.fuse(&m, &blind),
            Err(BeliefError::DegenerateLikelihood(Cell::new(0, 0)))
        );
    }

    #[test]
    fn obstacle_cells_stay_pinned() {
        let (g, _) = grid2();
        let o = ObstacleMap::from_cells(&g, [Cell::new(0, 0)]);
        let b = OccupancyBelief::uniform_prior(&g, &o, 0.5).unwrap();
        let m = MeasurementGrid {
            readings: vec![(Cell::new(0, 0), true)],
        };
        let s = SensorSpec::new(1.0, 1.0, 0.9, 0.1);
        assert_eq!(b.fuse(&m, &s).unwrap().get(Cell::new(0, 0)), 0.0);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(binary_entropy(0.5), 1.0);
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(1.0), 0.0);
        // -0.9 log2 0.9 - 0.1 log2 0.1 = 0.468995593589281...
        assert!((binary_entropy(0.9) - 0.468_995_593_589_281).abs() < 1e-12);
    }

    #[test]
    fn information_gain_values() {
        let flat = SensorSpec::new(1.0, 1.0, 0.3, 0.3);
        assert_eq!(cell_information_gain(0.4, &flat), 0.0);
        let s = SensorSpec::new(1.0, 1.0, 0.9, 0.1);
        assert!(cell_information_gain(0.0, &s).abs() < 1e-15);
        assert!(cell_information_gain(1.0, &s).abs() < 1e-15);
        let oracle = enumerate_mi_bits(0.5, 0.9, 0.1);
        assert!((oracle - 0.531_004_406_410_719).abs() < 1e-12);
        assert!((cell_information_gain(0.5, &s) - oracle).abs() < 1e-12);
    }

    #[test]
    fn trajectory_gain_examples() {
        let g = GridSpec::new(3, 3, 1.0).unwrap();
        let o = ObstacleMap::filled(&g, false);
        let b = OccupancyBelief::uniform_prior(&g, &o, 0.5).unwrap();
        let s = SensorSpec::new(0.4, 1.0, 0.9, 0.1);
        assert_eq!(trajectory_information_gain(&b, &[], &g, &o), 0.0);
        let poses = [RobotPose::new(1.5, 1.5)];
        let got = trajectory_information_gain(&b, &[(&poses, &s)], &g, &o);
        assert!((got - cell_information_gain(0.5, &s)).abs() < 1e-12);
        // Revisiting the same cell adds nothing.
        let twice = [poses[0], poses[0]];
        assert!((trajectory_information_gain(&b, &[(&twice, &s)], &g, &o) - got).abs() < 1e-15);

        let mut known = OccupancyBelief::uniform_prior(&g, &o, 0.0).unwrap();
        known.set(Cell::new(0, 0), 1.0).unwrap();
        let wide = SensorSpec::new(10.0, 1.0, 0.9, 0.1);
        assert!(trajectory_information_gain(&known, &[(&poses, &wide)], &g, &o).abs() < 1e-15);
    }

    #[test]
    fn csv_dump_layout() {
        let g = GridSpec::new(3, 2, 1.0).unwrap();
        let o = ObstacleMap::from_cells(&g, [Cell::new(2, 1)]);
        let b = OccupancyBelief::uniform_prior(&g, &o, 0.25).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "0.250000,0.250000,0.250000\n0.250000,0.250000,0.000000\n"
        );
    }

    proptest! {
        #[test]
        fn fuse_matches_enumeration(p in 0.001f64..0.999, tpr in 0.0f64..=1.0, fpr in 0.0f64..=1.0, occ: bool) {
            let s = SensorSpec::new(1.0, 1.0, tpr, fpr);
            if let Some(post) = bayes_update(p, occ, &s) {
                prop_assert!((post - enumerate_posterior(p, tpr, fpr, occ)).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&post));
            }
        }

        #[test]
        fn fusion_order_invariant(p in 0.001f64..0.999, a in (0.5f64..1.0, 0.0f64..0.5, any::<bool>()), b in (0.5f64..1.0, 0.0f64..0.5, any::<bool>())) {
            let sa = SensorSpec::new(1.0, 1.0, a.0, a.1);
            let sb = SensorSpec::new(1.0, 1.0, b.0, b.1);
            let ab = bayes_update(bayes_update(p, a.2, &sa).unwrap(), b.2, &sb).unwrap();
            let ba = bayes_update(bayes_update(p, b.2, &sb).unwrap(), a.2, &sa).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn occupied_readings_never_lower_belief(p in 0.0f64..=1.0, tpr in 0.5f64..1.0, gap in 0.01f64..0.5) {
            let s = SensorSpec::new(1.0, 1.0, tpr, (tpr - gap).max(0.0));
            let clamped = p.clamp(EPSILON, 1.0 - EPSILON);
            prop_assert!(bayes_update(clamped, true, &s).unwrap() >= clamped - 1e-15);
        }

        #[test]
        fn information_gain_bounds(p in 0.0f64..=1.0, tpr in 0.0f64..=1.0, fpr in 0.0f64..=1.0) {
            let s = SensorSpec::new(1.0, 1.0, tpr, fpr);
            let ig = cell_information_gain(p, &s);
            prop_assert!((ig - enumerate_mi_bits(p, tpr, fpr)).abs() < 1e-12);
            prop_assert!(ig >= 0.0);
            prop_assert!(ig <= binary_entropy(p).min(1.0) + 1e-12);
        }

        #[test]
        fn trajectory_gain_monotone(xs in proptest::collection::vec((0.0f64..6.0, 0.0f64..6.0), 0..4), extra in (0.0f64..6.0, 0.0f64..6.0), p0 in 0.05f64..0.95) {
            let g = GridSpec::new(6, 6, 1.0).unwrap();
            let o = ObstacleMap::from_cells(&g, [Cell::new(3, 3)]);
            let b = OccupancyBelief::uniform_prior(&g, &o, p0).unwrap();
            let s = SensorSpec::new(2.0, 0.7, 0.9, 0.1);
            let poses: Vec<RobotPose> = xs.iter().map(|&(x, y)| RobotPose::new(x, y)).collect();
            let mut more = poses.clone();
            more.push(RobotPose::new(extra.0, extra.1));
            let a = trajectory_information_gain(&b, &[(&poses, &s)], &g, &o);
            let c = trajectory_information_gain(&b, &[(&more, &s)], &g, &o);
            prop_assert!(c + 1e-12 >= a);
        }
    }
}
