use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use permon::ScenarioFile;

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.toml"))
}

fn permon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_permon"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_variant(dir: &Path, name: &str, edit: impl Fn(String) -> String) -> PathBuf {
    let text = edit(fs::read_to_string(bundled("example")).unwrap());
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn csv_column(path: &Path, column: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == column).unwrap();
    r.records()
        .map(|rec| rec.unwrap()[idx].parse().unwrap())
        .collect()
}

#[test]
fn validate_accepts_bundled_scenarios() {
    for name in ["example", "static", "deadzone", "noise"] {
        let o = permon(&["validate", s(&bundled(name))]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
        assert!(stdout(&o).starts_with("ok:"));
    }
}

#[test]
fn validate_reports_field_path_of_bad_value() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_variant(dir.path(), "bad.toml", |t| {
        t.replacen("sensing_range = 1.2", "sensing_range = -1.2", 1)
    });
    let o = permon(&["validate", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("agents[0].sensing_range"), "{}", stderr(&o));
}

#[test]
fn validate_reports_syntax_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_variant(dir.path(), "bad.toml", |t| {
        t.replacen("horizon = 12.0", "horizon = = 12.0", 1)
    });
    let line = fs::read_to_string(&bad)
        .unwrap()
        .lines()
        .position(|l| l.contains("= ="))
        .unwrap()
        + 1;
    let o = permon(&["validate", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(&format!("line {line}`")), "{}", stderr(&o));
}

#[test]
fn validate_warns_about_fast_target_but_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let fast = write_variant(dir.path(), "fast.toml", |t| {
        t.replacen(
            "[[0.0, 6.0], [6.0, 7.5], [12.0, 5.0]]",
            "[[0.0, 6.0], [1.0, 8.0], [12.0, 5.0]]",
            1,
        )
    });
    let o = permon(&["validate", s(&fast)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(
        stdout(&o).contains("warning: target 1 moves faster"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn simulate_writes_consistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = permon(&["simulate", s(&bundled("example")), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let states = fs::read_to_string(out.join("states.csv")).unwrap();
    assert_eq!(
        states.lines().next().unwrap(),
        "time,s_1,R_1,R_2,u_1,theta_1,theta_2"
    );
    let time = csv_column(&out.join("states.csv"), "time");
    assert_eq!(time[0], 0.0);
    assert_eq!(*time.last().unwrap(), 12.0);

    let events = fs::read_to_string(out.join("events.csv")).unwrap();
    assert_eq!(
        events.lines().next().unwrap(),
        "time,kind,agent_index,target_index,phase_index"
    );
    assert_eq!(events.lines().nth(1).unwrap(), "0.0,START,,,");

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let r = ScenarioFile::load(bundled("example")).unwrap().resolve().unwrap();
    let direct = permon::simulate(&r.scenario, &r.params, &r.options).unwrap();
    assert_eq!(summary["cost"].as_f64().unwrap(), direct.cost);
    assert_eq!(
        summary["event_count"].as_u64().unwrap() as usize,
        direct.events.len()
    );
    assert_eq!(events.lines().count() - 1, direct.events.len());
    assert_eq!(summary["config"]["horizon"].as_f64(), Some(12.0));
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = permon(&[
            "simulate",
            s(&bundled("noise")),
            "--seed",
            "7",
            "--output",
            s(out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["states.csv", "events.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    permon(&["simulate", s(&bundled("noise")), "--seed", "8", "--output", s(&c)]);
    assert_ne!(
        fs::read(a.join("states.csv")).unwrap(),
        fs::read(c.join("states.csv")).unwrap()
    );
}

#[test]
fn step_flag_overrides_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = permon(&[
        "simulate",
        s(&bundled("example")),
        "--step",
        "0.5",
        "--output",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["step"].as_f64(), Some(0.5));
}

#[test]
fn optimize_log_descends_and_snapshot_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("opt");
    let o = permon(&[
        "optimize",
        s(&bundled("example")),
        "--max-iters",
        "8",
        "--output",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let header = fs::read_to_string(out.join("iterates.csv")).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "iteration,J,grad_norm,step,backtracks"
    );
    let j = csv_column(&out.join("iterates.csv"), "J");
    assert_eq!(j.len(), 9);
    assert!(j.windows(2).all(|w| w[1] <= w[0]), "{j:?}");

    let snap = ScenarioFile::load(out.join("final.toml"))
        .unwrap()
        .resolve()
        .unwrap();
    let again = permon::simulate(&snap.scenario, &snap.params, &snap.options).unwrap();
    assert!((again.cost - j.last().unwrap()).abs() <= 1e-9);

    let o = permon(&[
        "simulate",
        s(&out.join("final.toml")),
        "--output",
        s(&dir.path().join("sim")),
    ]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn grad_check_appends_agreement_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("opt");
    let o = permon(&[
        "optimize",
        s(&bundled("example")),
        "--max-iters",
        "2",
        "--grad-check",
        "--output",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("iterates.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "iteration,J,grad_norm,step,backtracks,fd_compared,fd_disagreements,fd_max_abs_diff"
    );
    let compared = csv_column(&out.join("iterates.csv"), "fd_compared");
    let bad = csv_column(&out.join("iterates.csv"), "fd_disagreements");
    assert!(compared.iter().all(|&c| c > 0.0));
    assert!(bad.iter().all(|&b| b == 0.0));
}

#[test]
fn deadzone_experiment_passes_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dz");
    let o = permon(&[
        "experiment",
        "deadzone",
        s(&bundled("deadzone")),
        "--output",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS trailing_zero"), "{}", stdout(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], serde_json::Value::Bool(true));
    assert!(out.join("best_practical.toml").exists());
}

#[test]
fn static_experiment_reports_gap_and_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("st");
    let o = permon(&[
        "experiment",
        "static",
        s(&bundled("static")),
        "--max-iters",
        "3",
        "--output",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("cost_gap"));
    let variants: Vec<String> = csv::Reader::from_path(out.join("repetitions.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap()[2].to_string())
        .collect();
    assert!(variants.contains(&"optimal".to_string()) && variants.contains(&"practical".to_string()));
}

#[test]
fn noise_experiment_runs_on_small_budget() {
    let dir = tempfile::tempdir().unwrap();
    let text =
        fs::read_to_string(bundled("noise"))
            .unwrap()
            .replacen("repetitions = 50", "repetitions = 2", 1);
    assert!(text.contains("repetitions = 2"));
    let path = dir.path().join("noise.toml");
    fs::write(&path, text).unwrap();
    let out = dir.path().join("nz");
    let o = permon(&[
        "experiment",
        "noise",
        s(&path),
        "--max-iters",
        "1",
        "--output",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(csv_column(&out.join("repetitions.csv"), "initial_cost").len(), 4);
}

#[test]
fn noise_experiment_needs_noise_model() {
    let dir = tempfile::tempdir().unwrap();
    let o = permon(&[
        "experiment",
        "noise",
        s(&bundled("example")),
        "--output",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_codes_separate_usage_from_runtime_failures() {
    assert_eq!(permon(&["simulate"]).status.code(), Some(1));
    assert_eq!(permon(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(permon(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let limited = write_variant(dir.path(), "limited.toml", |t| {
        t + "\n[simulator]\nmax_events = 2\n"
    });
    let o = permon(&["simulate", s(&limited), "--output", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = permon(&["simulate", s(&bundled("example")), "--output", s(&blocker)]);
    assert_eq!(o.status.code(), Some(2));
}
