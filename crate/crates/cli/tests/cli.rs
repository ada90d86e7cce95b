use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_budgetcomm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 8] = [
    "--override",
    "train.epochs=3",
    "--override",
    "train.workers=1",
    "--override",
    "train.batch_steps=40",
    "--override",
    "train.mini_updates=1",
];

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--env",
        "tj-easy",
        "--mode",
        "fixed-cts",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(TINY);
    args.extend(extra);
    cli(&args)
}

#[test]
fn missing_env_block_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\"mode\": \"fixed-cts\"}").unwrap();
    let o = cli(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("env"), "{}", stderr(&o));
}

#[test]
fn unknown_override_and_bad_flags_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), &["--override", "budget.nonsense=1"]);
    assert_eq!(code(&o), 2);
    let o = cli(&["train", "--env", "tj-huge"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn same_seed_single_worker_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&train_tiny(&a, &[])), 0);
    assert_eq!(code(&train_tiny(&b, &[])), 0);
    let run = Path::new("tj-easy-fixed-cts").join("seed-5");
    let ma = std::fs::read(a.join(&run).join("metrics.jsonl")).unwrap();
    let mb = std::fs::read(b.join(&run).join("metrics.jsonl")).unwrap();
    assert_eq!(ma.iter().filter(|&&c| c == b'\n').count(), 3);
    assert_eq!(ma, mb);
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join(&run).join("config.json")).unwrap()).unwrap();
    assert_eq!(snap["train"]["epochs"], 3);
    assert_eq!(snap["seeds"], serde_json::json!([5]));
}

#[test]
fn evaluate_reports_open_gate_and_rejects_zero_episodes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_tiny(dir.path(), &[])), 0);
    let ck = dir.path().join("tj-easy-fixed-cts/seed-5/checkpoint.json");
    let out = dir.path().join("eval.json");
    let o = cli(&[
        "evaluate",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--episodes",
        "20",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(rep["c"], 1.0);
    assert_eq!(rep["episodes"], 20);
    let o = cli(&["evaluate", "--checkpoint", ck.to_str().unwrap(), "--episodes", "0"]);
    assert_eq!(code(&o), 4);
    let o = cli(&[
        "evaluate",
        "--checkpoint",
        dir.path().join("missing.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn exploding_learning_rate_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(
        dir.path(),
        &["--override", "train.lr=1e308", "--override", "train.grad_clip=1e308"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn report_is_reproducible_and_counts_corrupt_lines() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    assert_eq!(code(&train_tiny(&runs, &[])), 0);
    let metrics = runs.join("tj-easy-fixed-cts/seed-5/metrics.jsonl");
    let mut text = std::fs::read_to_string(&metrics).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&metrics, text).unwrap();

    let r1 = dir.path().join("r1");
    let r2 = dir.path().join("r2");
    let o = cli(&["report", runs.to_str().unwrap(), "--out", r1.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("skipped 1"));
    assert_eq!(
        code(&cli(&["report", runs.to_str().unwrap(), "--out", r2.to_str().unwrap()])),
        0
    );
    for f in ["runs.csv", "comparison.csv", "comm_fraction.svg", "success.svg"] {
        let a = std::fs::read(r1.join(f)).unwrap();
        assert_eq!(a, std::fs::read(r2.join(f)).unwrap(), "{f}");
    }
    let svg = std::fs::read_to_string(r1.join("comm_fraction.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    let csv = std::fs::read_to_string(r1.join("comparison.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("tj-easy,Fixed-Cts,1,"));
}

#[test]
fn empty_metrics_is_an_error_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("metrics.jsonl"), "").unwrap();
    let out = dir.path().join("report");
    let o = cli(&["report", run.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(!out.exists());
}

#[test]
fn oracle_prints_json_and_refuses_large_instances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    std::fs::write(
        &cfg,
        r#"{"env": {"difficulty": "easy", "grid": 3, "n_max": 1, "p_arrive": 0.5, "step_penalty": 0.01,
            "collision_penalty": 10.0, "max_steps": 6}}"#,
    )
    .unwrap();
    let o = cli(&["oracle", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["success"], 1.0);
    assert_eq!(r["b_lb"], 0.0);
    assert_eq!(code(&cli(&["oracle", "--env", "tj-medium"])), 2);
}

#[test]
fn singleton_sweep_matches_plain_training() {
    let dir = tempfile::tempdir().unwrap();
    let swept = dir.path().join("sweep");
    let mut args = vec![
        "sweep",
        "--env",
        "tj-easy",
        "--mode",
        "fixed-cts",
        "--seed",
        "5",
        "--out",
        swept.to_str().unwrap(),
    ];
    args.extend(TINY);
    args.extend(["--grid", "train.entropy_coef=0.02", "--episodes", "10"]);
    let o = cli(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plain = dir.path().join("plain");
    assert_eq!(code(&train_tiny(&plain, &["--override", "train.entropy_coef=0.02"])), 0);
    let run = Path::new("tj-easy-fixed-cts/seed-5/metrics.jsonl");
    assert_eq!(
        std::fs::read(swept.join(run)).unwrap(),
        std::fs::read(plain.join(run)).unwrap()
    );
    let csv = std::fs::read_to_string(swept.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("train.entropy_coef,seeds_ok"));
    assert!(lines[1].starts_with("0.02,1,0,"));
}

#[test]
fn sweep_records_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let mut args = vec![
        "sweep",
        "--env",
        "tj-easy",
        "--mode",
        "fixed-cts",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(TINY);
    args.extend(["--grid", "train.lr=-1,0.001", "--episodes", "5"]);
    assert_eq!(code(&cli(&args)), 0);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[1].starts_with("-1,0,1,"), "{csv}");
    assert!(lines[1].contains("lr"));
    assert!(lines[2].starts_with("0.001,1,0,"));
}
