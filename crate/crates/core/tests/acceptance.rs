//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails. Pass a substring to run a subset.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scouttask::belief::{cell_information_gain, OccupancyBelief};
use scouttask::bench::{run_benchmark, BenchReport, ReportFormat, TrialSpec};
use scouttask::objective::{
    mi_ucb_objective, reward_cgf, ucb_violation_rate, FootprintCache, JointPlan, ObjectiveConfig, ObjectiveMode,
    PlanMember, UcbCell, UcbInstance,
};
use scouttask::planner::{plan_round, PlanRequest, PlannerConfig};
use scouttask::scenario::ScenarioFile;
use scouttask::sensing::{MeasurementGrid, SensorSpec};
use scouttask::sim::run_episode;
use scouttask::world::{ActionSequence, Cell, GridSpec, Heading, ObstacleMap, RobotPose, RobotSpec};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_rates<R: Rng>(r: &mut R) -> (f64, f64) {
    let tpr = r.gen_range(0.5..0.999);
    (tpr, r.gen_range(0.001..tpr))
}

/// `E[exp R]` by walking every joint (occupancy, visibility) outcome.
fn joint_expectation(cells: &[(f64, f64)], idx: usize, weight: f64, reward: u32) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let Some(&(p, v)) = cells.get(idx) else {
        return weight * (reward as f64).exp();
    };
    let mut total = 0.0;
    for (occ, w_occ) in [(false, 1.0 - p), (true, p)] {
        for (vis, w_vis) in [(false, 1.0 - v), (true, v)] {
            let r = reward + u32::from(occ && vis);
            total += joint_expectation(cells, idx + 1, weight * w_occ * w_vis, r);
        }
    }
    total
}

fn cgf_oracle() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let cases = 200;
    for case in 0..cases {
        let k = r.gen_range(1..=12);
        let (closed, cells) = if case % 2 == 0 {
            let inst = UcbInstance {
                cells: (0..k)
                    .map(|_| UcbCell {
                        prior: r.gen_range(0.0..=1.0),
                        scout_visibility: 0.0,
                        true_positive_rate: 0.9,
                        false_positive_rate: 0.1,
                        task_visibility: r.gen_range(0.0..=1.0),
                    })
                    .collect(),
            };
            let cells = inst.cells.iter().map(|c| (c.prior, c.task_visibility)).collect::<Vec<_>>();
            (inst.reward_cgf(), cells)
        } else {
            // A k-cell strip seen by a task robot with partial visibility.
            let grid = GridSpec::new(k, 1, 1.0).unwrap();
            let obstacles = ObstacleMap::filled(&grid, false);
            let mut belief = OccupancyBelief::uniform_prior(&grid, &obstacles, 0.0).unwrap();
            for c in grid.cells() {
                belief.set(c, r.gen_range(0.0..=1.0)).unwrap();
            }
            let robot = RobotSpec {
                id: 0,
                scout_sensor: None,
                task_sensor: Some(SensorSpec::new(r.gen_range(0.5..4.0), r.gen_range(0.05..1.0), 1.0, 0.0)),
                start_pose: RobotPose::new(r.gen_range(0..k) as f64 + 0.5, 0.5),
            };
            let headings: Vec<Heading> = (0..2).map(|_| [Heading::E, Heading::W][r.gen_range(0..2)]).collect();
            let seq = ActionSequence::from_headings(0, &headings, 1.0);
            let plan = match PlanMember::new(&robot, robot.start_pose, seq, &grid, &obstacles) {
                Ok(m) => JointPlan::new(vec![m]).unwrap(),
                Err(_) => {
                    let stay = ActionSequence::stay(0, 2);
                    let m = PlanMember::new(&robot, robot.start_pose, stay, &grid, &obstacles).unwrap();
                    JointPlan::new(vec![m]).unwrap()
                }
            };
            let vis = plan.task_visibility(&grid, &obstacles);
            let cells = grid.cells().map(|c| (belief.get(c), vis.probabilities[c])).collect::<Vec<_>>();
            (reward_cgf(&plan, &belief, &grid, &obstacles), cells)
        };
        let oracle = joint_expectation(&cells, 0, 1.0, 0).ln();
        worst = worst.max((closed - oracle).abs());
    }
    outcome(worst <= 1e-9, format!("{cases} instances, worst error {worst:.2e} (tol 1e-9)"))
}

fn mi_oracle() -> Outcome {
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p: f64 = r.gen_range(0.0..=1.0);
        let (tpr, fpr) = random_rates(&mut r);
        let joint = [[(1.0 - p) * (1.0 - fpr), (1.0 - p) * fpr], [p * (1.0 - tpr), p * tpr]];
        let mut mi = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                let pxy: f64 = joint[x][y];
                let px = joint[x][0] + joint[x][1];
                let py = joint[0][y] + joint[1][y];
                if pxy > 0.0 {
                    mi += pxy * (pxy / (px * py)).log2();
                }
            }
        }
        let got = cell_information_gain(p, &SensorSpec::new(1.0, 1.0, tpr, fpr));
        worst = worst.max((got - mi).abs());
    }
    outcome(worst <= 1e-12, format!("1000 triples, worst error {worst:.2e} bits (tol 1e-12)"))
}

fn bayes_oracle() -> Outcome {
    let mut r = rng(303);
    let grid = GridSpec::new(1, 1, 1.0).unwrap();
    let obstacles = ObstacleMap::filled(&grid, false);
    let cell = Cell::new(0, 0);
    let belief_at = |p: f64| {
        let mut b = OccupancyBelief::uniform_prior(&grid, &obstacles, 0.5).unwrap();
        b.set(cell, p).unwrap();
        b
    };
    let reading = |y: bool| MeasurementGrid {
        readings: vec![(cell, y)],
    };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = r.gen_range(0.01..0.99);
        let (tpr, fpr) = random_rates(&mut r);
        let sensor = SensorSpec::new(1.0, 1.0, tpr, fpr);
        for y in [false, true] {
            let like = |occ: bool| {
                let rate = if occ { tpr } else { fpr };
                if y {
                    rate
                } else {
                    1.0 - rate
                }
            };
            let oracle = p * like(true) / (p * like(true) + (1.0 - p) * like(false));
            let got = belief_at(p).fuse(&reading(y), &sensor).unwrap().get(cell);
            worst = worst.max((got - oracle).abs());
        }
    }
    let mut order = 0.0f64;
    for _ in 0..100 {
        let b = belief_at(r.gen_range(0.01..0.99));
        let (t1, f1) = random_rates(&mut r);
        let (t2, f2) = random_rates(&mut r);
        let (s1, s2) = (SensorSpec::new(1.0, 1.0, t1, f1), SensorSpec::new(1.0, 1.0, t2, f2));
        let (m1, m2) = (reading(r.gen()), reading(r.gen()));
        let ab = b.fuse(&m1, &s1).unwrap().fuse(&m2, &s2).unwrap().get(cell);
        let ba = b.fuse(&m2, &s2).unwrap().fuse(&m1, &s1).unwrap().get(cell);
        order = order.max((ab - ba).abs());
    }
    outcome(
        worst <= 1e-12 && order <= 1e-12,
        format!("2000 updates worst {worst:.2e}, 100 order pairs worst {order:.2e} (tol 1e-12)"),
    )
}

/// Independent violation check: cells are independent, so the exact
/// posterior mean reward is a sum of per-cell posteriors.
fn independent_violation_rate(inst: &UcbInstance, delta: f64, n: usize, r: &mut ChaCha8Rng) -> f64 {
    let h = |q: f64| if q <= 0.0 || q >= 1.0 { 0.0 } else { -q * q.ln() - (1.0 - q) * (1.0 - q).ln() };
    let mut bound = 0.0;
    for c in &inst.cells {
        let (p, tpr, fpr) = (c.prior, c.true_positive_rate, c.false_positive_rate);
        let mi = h(p * tpr + (1.0 - p) * fpr) - p * h(tpr) - (1.0 - p) * h(fpr);
        bound += c.scout_visibility * mi / delta;
        bound += (1.0 + c.task_visibility * p * (std::f64::consts::E - 1.0)).ln();
    }
    let mut violations = 0;
    for _ in 0..n {
        let mut post = 0.0;
        for c in &inst.cells {
            let occ = r.gen::<f64>() < c.prior;
            let seen = r.gen::<f64>() < c.scout_visibility;
            let y = r.gen::<f64>() < if occ { c.true_positive_rate } else { c.false_positive_rate };
            let q = if seen {
                let (l1, l0) = if y {
                    (c.true_positive_rate, c.false_positive_rate)
                } else {
                    (1.0 - c.true_positive_rate, 1.0 - c.false_positive_rate)
                };
                l1 * c.prior / (l1 * c.prior + l0 * (1.0 - c.prior))
            } else {
                c.prior
            };
            post += c.task_visibility * q;
        }
        if post > bound + 1e-12 {
            violations += 1;
        }
    }
    violations as f64 / n as f64
}

fn ucb_bound() -> Outcome {
    let n = 100_000;
    let mut r = rng(404);
    let mut lines = Vec::new();
    let mut passed = true;
    for delta in [0.1, 0.5] {
        let tol = delta + 3.0 * (delta * (1.0f64 - delta) / n as f64).sqrt();
        let (mut worst_lib, mut worst_ind) = (0.0f64, 0.0f64);
        for _ in 0..5 {
            let k = r.gen_range(1..=8);
            let inst = UcbInstance {
                cells: (0..k)
                    .map(|_| {
                        let (tpr, fpr) = random_rates(&mut r);
                        UcbCell {
                            prior: r.gen_range(0.01..0.99),
                            scout_visibility: r.gen_range(0.0..=1.0),
                            true_positive_rate: tpr,
                            false_positive_rate: fpr,
                            task_visibility: r.gen_range(0.0..=1.0),
                        }
                    })
                    .collect(),
            };
            worst_lib = worst_lib.max(ucb_violation_rate(&inst, delta, n, &mut r).unwrap());
            worst_ind = worst_ind.max(independent_violation_rate(&inst, delta, n, &mut r));
        }
        passed &= worst_lib <= tol && worst_ind <= tol;
        lines.push(format!("delta {delta}: worst rate {worst_lib:.4} / {worst_ind:.4} (tol {tol:.4})"));
    }
    outcome(passed, format!("5 instances x {n} draws; {}", lines.join("; ")))
}

fn planner_toy() -> Outcome {
    let actions = vec![Heading::N, Heading::E, Heading::S, Heading::W];
    let mut matches = 0;
    for seed in 0..10u64 {
        let mut r = rng(500 + seed);
        let grid = GridSpec::new(9, 9, 1.0).unwrap();
        let obstacles = ObstacleMap::filled(&grid, false);
        let mut belief = OccupancyBelief::uniform_prior(&grid, &obstacles, 0.0).unwrap();
        for c in grid.cells() {
            belief.set(c, r.gen_range(0.0..1.0)).unwrap();
        }
        let robot = RobotSpec {
            id: 0,
            scout_sensor: Some(SensorSpec::new(1.5, 1.0, 0.9, 0.1)),
            task_sensor: Some(SensorSpec::new(0.5, 1.0, 1.0, 0.0)),
            start_pose: RobotPose::new(4.5, 4.5),
        };
        let cfg = PlannerConfig {
            horizon: 3,
            iterations: 20_000,
            actions: actions.clone(),
            objective: ObjectiveConfig::new(0.1, ObjectiveMode::MiUcb).unwrap(),
            ..PlannerConfig::default()
        };
        let score = |hs: &[Heading]| {
            let seq = ActionSequence::from_headings(0, hs, 1.0);
            let m = PlanMember::new(&robot, robot.start_pose, seq, &grid, &obstacles).ok()?;
            Some(mi_ucb_objective(&JointPlan::new(vec![m]).unwrap(), &belief, &cfg.objective, &grid, &obstacles))
        };
        let mut best = f64::NEG_INFINITY;
        for a in &actions {
            for b in &actions {
                for c in &actions {
                    if let Some(s) = score(&[*a, *b, *c]) {
                        best = best.max(s);
                    }
                }
            }
        }
        let req = PlanRequest {
            robot: &robot,
            pose: robot.start_pose,
            belief: &belief,
            grid: &grid,
            obstacles: &obstacles,
            step_length: 1.0,
            teammates: &[],
            round: 0,
        };
        let out = plan_round(&req, &cfg, &mut FootprintCache::new(), &mut rng(seed)).unwrap();
        if score(&out.best.headings()).is_some_and(|s| (s - best).abs() <= 1e-12) {
            matches += 1;
        }
    }
    outcome(matches >= 9, format!("{matches}/10 exact matches with exhaustive search (need 9)"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:+.1}%"))
}

fn two_robot_comparison() -> Outcome {
    let file = ScenarioFile::builtin("two-robot").unwrap();
    let report = run_benchmark(&TrialSpec::new(file, 20), None, ReportFormat::Csv).unwrap();
    let ucb = report.group(ObjectiveMode::MiUcb, None).unwrap();
    let ex = report.group(ObjectiveMode::Expectimax, None).unwrap();
    let imp = report.improvement(None).unwrap();
    outcome(
        ucb.fraction_confirmed.median > ex.fraction_confirmed.median,
        format!(
            "20 paired runs: median fraction mi-ucb {:.3} vs expectimax {:.3}; improvement fraction {} reward/distance {}",
            ucb.fraction_confirmed.median,
            ex.fraction_confirmed.median,
            pct(imp.fraction_confirmed_pct),
            pct(imp.reward_per_distance_pct)
        ),
    )
}

fn composition_trend() -> Outcome {
    let file = ScenarioFile::builtin("four-robot").unwrap();
    let mut spec = TrialSpec::new(file, 5);
    spec.compositions = vec![1, 2, 3, 4];
    let report: BenchReport = run_benchmark(&spec, None, ReportFormat::Csv).unwrap();
    let imp = |k| report.improvement(Some(k)).and_then(|i| i.reward_per_distance_pct);
    let all: Vec<String> = (1..=4).map(|k| format!("{k}: {}", pct(imp(k)))).collect();
    let passed = match (imp(1), imp(2), imp(4)) {
        (Some(a), Some(b), Some(four)) => (a + b) / 2.0 > four && four.abs() <= 10.0,
        _ => false,
    };
    outcome(
        passed,
        format!("reward/distance improvement by scout count {}", all.join(", ")),
    )
}

fn determinism() -> Outcome {
    let mut identical = true;
    for (name, seed) in [("two-robot", 11), ("four-robot", 3)] {
        let file = ScenarioFile::builtin(name).unwrap();
        let csv = |parallel: bool| {
            let mut cfg = file.episode_config(seed, None).unwrap();
            cfg.max_ticks = cfg.max_ticks.min(10);
            cfg.parallel = parallel;
            let m = run_episode(&cfg).unwrap().metrics;
            let mut out = Vec::new();
            m.write_ticks_csv(&mut out).unwrap();
            m.write_summary_csv(&mut out).unwrap();
            out
        };
        let first = csv(false);
        identical &= first == csv(false) && first == csv(true);
    }
    outcome(identical, "repeated episodes give byte-identical metrics CSV".into())
}

fn confirmation_drop() -> Outcome {
    let file = ScenarioFile::builtin("two-robot").unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    let completion = |drop: f64, max_ticks: u64, seed: u64| {
        let mut cfg = file.episode_config(seed, None).unwrap();
        cfg.max_ticks = max_ticks;
        cfg.bus.drop_probability.confirmation = drop;
        run_episode(&cfg).unwrap().metrics.completion_tick
    };
    let mut baseline: Vec<f64> = seeds
        .iter()
        .map(|&s| completion(0.0, 300, s).map_or(f64::INFINITY, |t| t as f64))
        .collect();
    baseline.sort_by(f64::total_cmp);
    let median = (baseline[4] + baseline[5]) / 2.0;
    if !median.is_finite() {
        return outcome(false, "most runs without drops never finish in 300 ticks".into());
    }
    let limit = (3.0 * median).floor() as u64;
    let done: Vec<Option<u64>> = seeds.iter().map(|&s| completion(0.5, limit, s)).collect();
    let finished = done.iter().filter(|t| t.is_some()).count();
    let slowest = done.iter().flatten().max().copied().unwrap_or(0);
    outcome(
        finished == seeds.len(),
        format!(
            "{finished}/10 runs complete within {limit} ticks (3x median {median:.1}); slowest {slowest}"
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 9] = [
        ("cgf oracle", cgf_oracle, Duration::from_secs(10)),
        ("mutual information oracle", mi_oracle, Duration::from_secs(1)),
        ("bayes fusion oracle", bayes_oracle, Duration::from_secs(1)),
        ("ucb violation rate", ucb_bound, Duration::from_secs(120)),
        ("planner toy optimality", planner_toy, Duration::from_secs(60)),
        ("two-robot mi-ucb vs expectimax", two_robot_comparison, Duration::from_secs(15 * 60)),
        ("four-robot composition trend", composition_trend, Duration::from_secs(30 * 60)),
        ("determinism", determinism, Duration::from_secs(60)),
        ("confirmation drop robustness", confirmation_drop, Duration::from_secs(30 * 60)),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, run, limit) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let passed = out.passed && elapsed <= limit;
        failed += usize::from(!passed);
        println!(
            "{} {name}: {} [{:.2}s, limit {}s]",
            if passed { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
