use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spederlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn gen_mdp_is_deterministic_and_writes_a_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-mdp", "--kind", "random", "--states", "12", "--actions", "3", "--rank", "4", "--seed", "5"];
    ok(dir.path(), &[&args[..], &["-o", "a.json"]].concat());
    ok(dir.path(), &[&args[..], &["-o", "b.json"]].concat());
    let a = fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.json")).unwrap());
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a.json.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["command"], "gen-mdp");
    assert!(meta["version"].is_string());
}

#[test]
fn missing_required_flag_exits_1_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-dataset", "--samples", "10", "-o", "d.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_flag_exits_1_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-mdp", "--bogus", "-o", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn invalid_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-mdp", "--kind", "random", "--states", "4", "--rank", "9", "-o", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn verify_simlemma_reports_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["verify", "--suite", "simlemma", "--seed", "1"]);
    assert!(stdout.starts_with("PASS"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let list = report.as_array().unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0]["violations"], 0);
}

#[test]
fn config_file_values_yield_to_command_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "# gridworld\nkind = gridworld\nside = 3\nseed = 1\n").unwrap();
    ok(dir.path(), &["gen-mdp", "--config", "run.cfg", "--side", "4", "-o", "g.json"]);
    let mdp: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(mdp["num_states"], 16);
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-mdp", "--kind", "gridworld", "--side", "3", "--gamma", "0.9", "-o", "g.json"]);
    ok(d, &["gen-dataset", "--mdp", "g.json", "--samples", "3000", "--policy-out", "b.json", "--seed", "1", "-o", "off.csv"]);
    ok(d, &[
        "gen-dataset", "--mdp", "g.json", "--policy", "epsilon-greedy", "--epsilon", "0.05",
        "--trajectories", "4", "--horizon", "15", "--seed", "2", "-o", "exp.csv",
    ]);
    ok(d, &[
        "learn", "--mdp", "g.json", "--dataset", "off.csv", "--learner", "gradient", "--dim", "9",
        "--steps", "500", "--curve", "loss.csv", "--seed", "3", "-o", "fm.json",
    ]);
    let curve = fs::read_to_string(d.join("loss.csv")).unwrap();
    assert!(curve.lines().count() > 1);
    ok(d, &["explore", "--mdp", "g.json", "--episodes", "10", "--seed", "4", "-o", "runs.csv"]);
    let runs = fs::read_to_string(d.join("runs.csv")).unwrap();
    assert_eq!(
        runs.lines().next().unwrap(),
        "episode,value_optimal,value_current,regret_cumulative,bonus_mean,l2_model_error,optimism_margin"
    );
    assert_eq!(runs.lines().count(), 11);
    ok(d, &["offline", "--mdp", "g.json", "--dataset", "off.csv", "--behavior", "b.json", "--seed", "5", "-o", "rec.json"]);
    ok(d, &[
        "bc", "--mdp", "g.json", "--expert", "exp.csv", "--offline", "off.csv", "--feature-model", "fm.json",
        "--decoder-steps", "200", "--z-samples", "16", "--seed", "6", "-o", "bc.json",
    ]);
    let bc: serde_json::Value = serde_json::from_slice(&fs::read(d.join("bc.json")).unwrap()).unwrap();
    for key in ["pretrain_nll", "bc_nll", "return_expert", "return_cloned", "return_bc_baseline"] {
        assert!(bc[key].is_number(), "{key}");
    }
    let summary = ok(d, &["report", "runs.csv", "rec.json", "bc.json"]);
    assert!(summary.starts_with("metric,count,mean,std"));
    assert!(summary.lines().any(|l| l.starts_with("return_cloned,1,")));
}

#[test]
fn report_over_one_file_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-mdp", "--kind", "random", "--states", "6", "--actions", "2", "--rank", "2", "-o", "m.json"]);
    ok(d, &["explore", "--mdp", "m.json", "--episodes", "5", "-o", "r.csv"]);
    ok(d, &["report", "r.csv", "-o", "s.csv"]);
    let text = fs::read_to_string(d.join("s.csv")).unwrap();
    for line in text.lines().skip(1) {
        assert!(line.ends_with(",0.0") || line.ends_with(",0"), "{line}");
    }
}
