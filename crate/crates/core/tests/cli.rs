use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tokrl::experiment::report::{compare_csvs, read_metrics, ArmSummary};

fn tokrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokrl")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tokrl(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_requires_config_seed_and_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "episodes = 1\n");
    let out = dir.path().join("run");
    assert!(!tokrl(&["train", "--seed", "0", "--out", s(&out)]).status.success());
    assert!(!tokrl(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    assert!(!tokrl(&["train", "--config", s(&cfg), "--seed", "0"]).status.success());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "episodes = 1\nlearning_rate = 0.1\n");
    let out = tokrl(&["train", "--config", s(&cfg), "--seed", "0", "--out", s(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn train_writes_reports_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "episodes = 4\nrollouts_per_episode = 16\n");
    let out = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--seed", "3", "--out", s(&out), "--q", "7", "--checkpoint-every", "2"]);
    let rows = read_metrics(&out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.seed == 3));
    for f in ["summary.json", "policy.json", "config.toml", "policy-ep2.json", "policy-ep4.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let written = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(written.contains("q = 7"));

    let evaluated = ok(&["eval", "--config", s(&cfg), "--policy", s(&out.join("policy.json")), "--rollouts", "50"]);
    assert!(evaluated.contains("mean correctness"));

    // resume from the checkpoint
    let resumed = dir.path().join("resumed");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "3",
        "--out",
        s(&resumed),
        "--init",
        s(&out.join("policy.json")),
        "--episodes",
        "1",
    ]);
    assert_eq!(read_metrics(&resumed.join("metrics.csv")).unwrap().len(), 1);
}

#[test]
fn q_sweep_writes_one_csv_per_run_and_a_recomputable_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "episodes = 2\nrollouts_per_episode = 8\n");
    let out = dir.path().join("sweep");
    ok(&[
        "sweep", "--config", s(&cfg), "--axis", "q", "--values", "3,5,7,9", "--seeds", "0,1,2,3,4", "--out", s(&out),
    ]);
    let mut groups = Vec::new();
    for q in ["3", "5", "7", "9"] {
        let paths: Vec<PathBuf> = (0..5).map(|seed| out.join(format!("q={q}/seed-{seed}/metrics.csv"))).collect();
        assert!(paths.iter().all(|p| p.exists()));
        groups.push((q.to_string(), paths));
    }
    let mut reader = csv::Reader::from_path(out.join("comparison.csv")).unwrap();
    let table: Vec<ArmSummary> = reader.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(table.len(), 4);
    assert!(table.iter().all(|a| a.runs == 5));
    assert_eq!(compare_csvs("q", &groups, 10).unwrap(), table);
}

#[test]
fn oracle_check_passes() {
    let out = ok(&["oracle-check", "--bayes-tasks", "2", "--quantile-cases", "50", "--gradient-seeds", "3"]);
    assert!(out.contains("PASS"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn warmup_and_weigher_checkpoints_feed_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "task = \"multi_attr_2\"\nepisodes = 2\nrollouts_per_episode = 8\ncorpus_size = 32\nweigher_steps = 20\n",
    );
    let policy = dir.path().join("warm/policy.json");
    let weigher = dir.path().join("w/weigher.json");
    ok(&["warmup", "--config", s(&cfg), "--seed", "1", "--out", s(&policy), "--warmup-steps", "20"]);
    ok(&["train-weigher", "--config", s(&cfg), "--seed", "1", "--out", s(&weigher), "--policy", s(&policy)]);
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "1",
        "--out",
        s(&run),
        "--init",
        s(&policy),
        "--weigher",
        s(&weigher),
    ]);
    let saved = std::fs::read_to_string(run.join("weigher.json")).unwrap();
    let given = std::fs::read_to_string(&weigher).unwrap();
    let params = |t: &str| serde_json::from_str::<serde_json::Value>(t).unwrap()["params"].clone();
    assert_eq!(params(&saved), params(&given));
}

#[test]
fn corpus_file_warmup() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "great good movie\ngood happy great the\n").unwrap();
    let policy = dir.path().join("p.json");
    ok(&["warmup", "--seed", "0", "--out", s(&policy), "--corpus", s(&corpus), "--warmup-steps", "5"]);
    std::fs::write(&corpus, "great unknownword\n").unwrap();
    assert!(!tokrl(&["warmup", "--seed", "0", "--out", s(&policy), "--corpus", s(&corpus)]).status.success());
}
