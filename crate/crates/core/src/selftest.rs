//! Built-in oracle suites: the closed forms against exhaustive enumeration.

use rand::Rng;
use serde::Serialize;

use crate::belief::{bayes_update, cell_information_gain, OccupancyBelief};
use crate::objective::{ucb_violation_rate, UcbCell, UcbInstance};
use crate::rng::stream;
use crate::sensing::{MeasurementGrid, SensorSpec};
use crate::world::{Cell, GridSpec, ObstacleMap};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// Largest observed error (or violation rate for the bound check).
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<8} cases={:<6} worst={:.3e} tol={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

fn random_sensor<R: Rng>(rng: &mut R) -> SensorSpec {
    let tpr = rng.gen_range(0.5..0.999);
    let fpr = rng.gen_range(0.001..tpr);
    SensorSpec::new(1.0, 1.0, tpr, fpr)
}

fn random_instance<R: Rng>(rng: &mut R, k: usize) -> UcbInstance {
    UcbInstance {
        cells: (0..k)
            .map(|_| {
                let s = random_sensor(rng);
                UcbCell {
                    prior: rng.gen_range(0.01..0.99),
                    scout_visibility: rng.gen_range(0.0..=1.0),
                    true_positive_rate: s.true_positive_rate,
                    false_positive_rate: s.false_positive_rate,
                    task_visibility: rng.gen_range(0.0..=1.0),
                }
            })
            .collect(),
    }
}

/// `log E[exp R]` by summing over every occupancy configuration, with
/// visibility integrated per occupied cell.
fn cgf_by_enumeration(instance: &UcbInstance) -> f64 {
    let cells = &instance.cells;
    let e = std::f64::consts::E;
    let mut expectation = 0.0;
    for config in 0u32..(1 << cells.len()) {
        let mut w = 1.0;
        let mut exp_r = 1.0;
        for (idx, c) in cells.iter().enumerate() {
            if config >> idx & 1 == 1 {
                w *= c.prior;
                exp_r *= 1.0 - c.task_visibility + c.task_visibility * e;
            } else {
                w *= 1.0 - c.prior;
            }
        }
        expectation += w * exp_r;
    }
    expectation.ln()
}

pub fn cgf_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = stream(seed, &[1]);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = rng.gen_range(1..=12);
        let inst = random_instance(&mut rng, k);
        worst = worst.max((inst.reward_cgf() - cgf_by_enumeration(&inst)).abs());
    }
    SuiteResult {
        name: "cgf",
        cases,
        worst,
        tolerance: 1e-9,
        passed: worst <= 1e-9,
    }
}

fn mi_by_joint(p: f64, s: &SensorSpec) -> f64 {
    let joint = [
        [(1.0 - p) * (1.0 - s.false_positive_rate), (1.0 - p) * s.false_positive_rate],
        [p * (1.0 - s.true_positive_rate), p * s.true_positive_rate],
    ];
    let px = [1.0 - p, p];
    let py = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut mi = 0.0;
    for x in 0..2 {
        for y in 0..2 {
            if joint[x][y] > 0.0 {
                mi += joint[x][y] * (joint[x][y] / (px[x] * py[y])).log2();
            }
        }
    }
    mi
}

pub fn mi_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = stream(seed, &[2]);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let p = rng.gen_range(0.0..=1.0);
        let s = random_sensor(&mut rng);
        worst = worst.max((cell_information_gain(p, &s) - mi_by_joint(p, &s)).abs());
    }
    SuiteResult {
        name: "mi",
        cases,
        worst,
        tolerance: 1e-12,
        passed: worst <= 1e-12,
    }
}

pub fn bayes_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = stream(seed, &[3]);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let p = rng.gen_range(0.01..0.99);
        let s = random_sensor(&mut rng);
        for y in [false, true] {
            let like = |occ: bool| {
                let rate = if occ { s.true_positive_rate } else { s.false_positive_rate };
                if y {
                    rate
                } else {
                    1.0 - rate
                }
            };
            let joint1 = p * like(true);
            let joint0 = (1.0 - p) * like(false);
            let oracle = joint1 / (joint0 + joint1);
            let got = bayes_update(p, y, &s).unwrap_or(f64::NAN);
            worst = worst.max((got - oracle).abs());
        }
    }
    // Fusion order must not matter.
    let grid = GridSpec::new(1, 1, 1.0).expect("valid grid");
    let obstacles = ObstacleMap::filled(&grid, false);
    let cell = Cell::new(0, 0);
    for _ in 0..cases / 10 {
        let mut b = OccupancyBelief::uniform_prior(&grid, &obstacles, 0.5).expect("valid prior");
        b.set(cell, rng.gen_range(0.01..0.99)).expect("valid probability");
        let (s1, s2) = (random_sensor(&mut rng), random_sensor(&mut rng));
        let m1 = MeasurementGrid {
            readings: vec![(cell, rng.gen())],
        };
        let m2 = MeasurementGrid {
            readings: vec![(cell, rng.gen())],
        };
        let ab = b.fuse(&m1, &s1).and_then(|x| x.fuse(&m2, &s2));
        let ba = b.fuse(&m2, &s2).and_then(|x| x.fuse(&m1, &s1));
        match (ab, ba) {
            (Ok(ab), Ok(ba)) => worst = worst.max((ab.get(cell) - ba.get(cell)).abs()),
            _ => worst = f64::INFINITY,
        }
    }
    SuiteResult {
        name: "bayes",
        cases,
        worst,
        tolerance: 1e-12,
        passed: worst <= 1e-12,
    }
}

/// Violation rate of the bound on random small instances; the tolerance
/// is `delta` plus three binomial standard errors.
pub fn ucb_suite(seed: u64, instances: usize, samples: usize) -> Vec<SuiteResult> {
    [0.1, 0.5]
        .iter()
        .enumerate()
        .map(|(d_idx, &delta)| {
            let mut rng = stream(seed, &[4, d_idx as u64]);
            let tol = delta + 3.0 * (delta * (1.0 - delta) / samples as f64).sqrt();
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let k = rng.gen_range(1..=8);
                let inst = random_instance(&mut rng, k);
                let rate = ucb_violation_rate(&inst, delta, samples, &mut rng).unwrap_or(f64::INFINITY);
                worst = worst.max(rate);
            }
            SuiteResult {
                name: if d_idx == 0 { "ucb-0.1" } else { "ucb-0.5" },
                cases: instances,
                worst,
                tolerance: tol,
                passed: worst <= tol,
            }
        })
        .collect()
}

pub fn run_all(seed: u64, ucb_samples: usize) -> Vec<SuiteResult> {
    let mut out = vec![cgf_suite(seed, 200), mi_suite(seed, 1000), bayes_suite(seed, 1000)];
    out.extend(ucb_suite(seed, 5, ucb_samples));
    out
}
