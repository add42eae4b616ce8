use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn recritic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recritic")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic dataset plus a quick-training config in `dir`.
fn workspace(dir: &Path, extra: &str) -> PathBuf {
    let data = dir.join("synthetic.jsonl");
    let o = recritic(&["synth-data", s(&data), "--users-per-cluster", "60"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.join("experiment.toml");
    let text = format!(
        "users = 120\nout = \"{}\"\n{extra}\n[dataset]\npath = \"{}\"\nschema = \"generic\"\n\n[critic]\nhidden = 16\nepochs = 8\n\n[oracle]\nhidden = 16\nepochs = 8\n",
        s(&dir.join("run")),
        s(&data)
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

fn report_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let o = recritic(&["train-critic", "--dataset", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.jsonl"), "{}", stderr(&o));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(recritic(&["run-experiment", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(recritic(&["report"]).status.code(), Some(2));
    assert_eq!(recritic(&["replay", "x", "--mode", "sideways"]).status.code(), Some(2));
}

#[test]
fn ingest_check_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "");
    let o = recritic(&["ingest-check", "--config", s(&cfg), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["stats"]["users"], 120);
    assert_eq!(v["load"]["kept"], 3600);
}

#[test]
fn train_critic_with_user_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "");
    let o = recritic(&["train-critic", "--config", s(&cfg), "--users", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    assert!(run.join("critic-u100.model").exists());
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("critic-u100.log.json")).unwrap()).unwrap();
    assert!(!log["log"]["epochs"].as_array().unwrap().is_empty());
}

#[test]
fn experiment_replay_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "loops = 3");
    let c = s(&cfg);
    for cmd in ["train-critic", "build-oracle", "run-experiment"] {
        let o = recritic(&[cmd, "--config", c]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let run = dir.path().join("run");
    let report = report_json(&run);
    let loops = report["loops"].as_array().unwrap();
    assert_eq!(loops.len(), 4);
    assert!(loops.iter().all(|l| l["at"].as_array().unwrap().len() == 3));

    // a fresh output directory has no critic yet
    let o = recritic(&["run-experiment", "--config", c, "--out", s(&dir.path().join("fresh"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("critic.model"), "{}", stderr(&o));

    let o = recritic(&["replay", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), fs::read_to_string(run.join("report.txt")).unwrap());

    let other = dir.path().join("replayed");
    let o = recritic(&["replay", s(&run.join("traces.jsonl")), "--ns", "5", "--write", s(&other)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(report_json(&other)["ns"], serde_json::json!([5]));

    let o = recritic(&["report", s(&run)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("p50 ms"));

    let o = recritic(&["report", s(&run), s(&run)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().next().unwrap().matches("run").count(), 2);
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "");
    let c = s(&cfg);
    for cmd in ["train-critic", "build-oracle"] {
        assert!(recritic(&[cmd, "--config", c]).status.success());
    }
    let model_dir = dir.path().join("run");
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        fs::create_dir_all(&out).unwrap();
        for f in ["critic.model", "oracle.model"] {
            fs::copy(model_dir.join(f), out.join(f)).unwrap();
        }
        let o = recritic(&["run-experiment", "--config", c, "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push((fs::read(out.join("report.json")).unwrap(), fs::read(out.join("traces.jsonl")).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn candidate_mode_is_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), "");
    assert!(recritic(&["train-critic", "--config", s(&cfg)]).status.success());
    let o = recritic(&["run-experiment", "--config", s(&cfg), "--mode", "candidate_set"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = report_json(&dir.path().join("run"));
    assert_eq!(report["mode"], "candidate_set");
    assert!(report["loops"][0]["unresolved_fraction"].is_number());
}

#[test]
fn unreachable_backend_fails_and_report_shows_notice() {
    let dir = tempfile::tempdir().unwrap();
    let remote = "mode = \"real_only\"\n\n[backend]\nkind = \"remote\"\nurl = \"http://127.0.0.1:9/v1/chat/completions\"\ntoken_env = \"RECRITIC_TEST_UNSET\"\n\n[backend.retry]\ninitial_backoff_ms = 1\n";
    let cfg = workspace(dir.path(), remote);
    assert!(recritic(&["train-critic", "--config", s(&cfg)]).status.success());
    let o = recritic(&["run-experiment", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = recritic(&["report", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("no successful users"), "{}", stdout(&o));
}
