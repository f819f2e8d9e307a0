use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use walkdir::WalkDir;

fn bench(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delayed-bench"))
        .arg("--out")
        .arg(root)
        .args(args)
        .env_remove("DELAYED_RL_RUNS")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const GRID: &str = r#"
envs = ["frozen_lake4", "stormy_road"]
randomness = [0.0, 0.1]
delays = [1]
methods = ["smbs", "delayed_q", "amdp"]
seeds = 5

[base]
steps = 200
warmup = 100
eval_period = 100
eval_steps = 50
final_eval_steps = 100
samples = 2
"#;

#[test]
fn theorem_one_holds_on_the_deterministic_lake() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(dir.path(), &["verify", "--theorem", "1", "--env", "frozen_lake4", "--r", "0", "--d", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains(" 0 mismatches"), "{}", stdout(&out));
}

#[test]
fn theorem_one_rejects_stochastic_dynamics() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(dir.path(), &["verify", "--theorem", "1", "--env", "frozen_lake4", "--r", "0.1", "--d", "1"]);
    assert!(!out.status.success());
}

#[test]
fn unknown_method_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(dir.path(), &["train", "--method", "sarsa"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sarsa") && err.contains("Usage:"), "{err}");
    assert!(!dir.path().join("frozen_lake4").exists());
}

#[test]
fn bad_config_file_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "steps = \"many\"\n").unwrap();
    let out = bench(dir.path(), &["train", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn train_then_eval_reproduces_the_final_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(&config, "env = \"cliff\"\nsteps = 400\nwarmup = 100\neval_period = 200\neval_steps = 100\nfinal_eval_steps = 300\n").unwrap();
    let out = bench(dir.path(), &["train", "--config", config.to_str().unwrap(), "--method", "delayed_q", "--d", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("cliff/delayed_q/2/0/0");
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("record.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["steps"], 400);
    let out = bench(dir.path(), &["eval", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stats: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(stats["score"], record["final_eval"]["score"]);
}

#[test]
fn sweep_writes_one_record_per_run_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, GRID).unwrap();
    let grid = grid.to_str().unwrap();

    let out = bench(&root, &["sweep", grid, "--parallelism", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("trained 60, loaded 0"), "{}", stdout(&out));
    let records = WalkDir::new(&root).into_iter().filter(|e| e.as_ref().unwrap().file_name() == "record.json").count();
    assert_eq!(records, 60);

    let snapshot = |root: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = WalkDir::new(root)
            .sort_by_file_name()
            .into_iter()
            .map(|e| e.unwrap())
            .filter(|e| e.file_type().is_file() && e.file_name() != "timing.json")
            .map(|e| (e.path().display().to_string(), fs::read(e.path()).unwrap()))
            .collect();
        files.sort();
        files
    };
    let before = snapshot(&root);
    let out = bench(&root, &["sweep", grid]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("trained 0, loaded 60"), "{}", stdout(&out));
    assert_eq!(before, snapshot(&root));

    // Plot tables over fixed records are byte-identical.
    let a = bench(&root, &["plotdata", "fig4"]);
    let b = bench(&root, &["plotdata", "fig4"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let table = stdout(&a);
    assert_eq!(table.lines().count(), 2 + 12, "{table}");
    let file = dir.path().join("fig4.csv");
    assert!(bench(&root, &["plotdata", "fig4", "--output", file.to_str().unwrap()]).status.success());
    assert_eq!(fs::read(&file).unwrap(), a.stdout);
}

#[test]
fn cliff_study_tables_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench(dir.path(), &["cliff-study", "--episodes", "5", "--samples", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("ran"));
    let out = bench(dir.path(), &["cliff-study", "--episodes", "5", "--samples", "3"]);
    assert!(stdout(&out).starts_with("loaded"));
    for table in ["alpha-sweep", "cliff-paths"] {
        let a = bench(dir.path(), &["plotdata", table]);
        assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
        assert_eq!(a.stdout, bench(dir.path(), &["plotdata", table]).stdout);
    }
    let sweep = stdout(&bench(dir.path(), &["plotdata", "alpha-sweep"]));
    // Two slips times six α values.
    assert_eq!(sweep.lines().count(), 2 + 12);
}
