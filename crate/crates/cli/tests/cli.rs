use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scouttask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scouttask")).args(args).output().unwrap()
}

const SCOUT_ONLY: &str = r#"
name = "scout-only"
step_length = 1.0
prior = 0.05

[grid]
n_x = 10
n_y = 10
cell_size = 1.0

[targets]
cells = [[7, 7]]

[[robots]]
id = 0
start = [1.5, 1.5]
scout = { range = 4.0, p_visible = 1.0, true_positive_rate = 0.9, false_positive_rate = 0.05 }

[[robots]]
id = 1
start = [4.5, 4.5]
task = { range = 1.5, p_visible = 1.0, true_positive_rate = 1.0, false_positive_rate = 0.0 }

[episode]
max_ticks = 3

[planner]
horizon = 3
iterations = 50
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn selftest_passes() {
    let out = scouttask(&["selftest", "--samples", "4000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().count() >= 5);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn expectimax_warns_about_scout_only_robots() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", SCOUT_ONLY);
    let out = scouttask(&["run", &path, "--mode", "expectimax", "--quiet"]);
    assert!(out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("no gradient"), "{stderr}");

    let out = scouttask(&["run", &path, "--mode", "mi-ucb", "--quiet"]);
    assert!(out.status.success());
    assert!(!String::from_utf8(out.stderr).unwrap().contains("no gradient"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", &SCOUT_ONLY.replace("prior = 0.05", "prior = 2.0"));
    assert_eq!(scouttask(&["run", &bad]).status.code(), Some(2));
    assert_eq!(scouttask(&["run", "--builtin", "nowhere"]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml").display().to_string();
    assert_eq!(scouttask(&["run", &missing]).status.code(), Some(2));
    let trial = write(dir.path(), "t.toml", "builtin = \"two-robot\"\nn_runs = 0\n");
    assert_eq!(scouttask(&["bench", &trial]).status.code(), Some(2));
}

#[test]
fn run_writes_metrics_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", SCOUT_ONLY);
    let out_dir = dir.path().join("out");
    let out = scouttask(&["run", &path, "--seed", "4", "--trace", "--quiet", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    for f in ["ticks.csv", "summary.csv", "targets.csv", "planner_trace.ndjson", "messages.ndjson"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let ticks = fs::read_to_string(out_dir.join("ticks.csv")).unwrap();
    assert!(ticks.starts_with("tick,confirmed,r0_x,r0_y,r0_distance,r1_x"));
}

#[test]
fn bench_writes_forty_episode_rows() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/four_robot.toml")).unwrap();
    write(dir.path(), "four.toml", &scenario);
    let trial = write(
        dir.path(),
        "trial.toml",
        "scenario = \"four.toml\"\nn_runs = 5\ncompositions = [1, 2, 3, 4]\nmax_ticks = 2\niterations = 20\n",
    );
    let out_dir = dir.path().join("out");
    let out = scouttask(&["bench", &trial, "--quiet", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let episodes = fs::read_to_string(out_dir.join("episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 41);
    assert!(out_dir.join("summary.csv").exists());
    assert!(out_dir.join("plot_data.csv").exists());
}
