use std::path::{Path, PathBuf};

use budgetcomm::checkpoint::Checkpoint;
use budgetcomm::config::ExperimentConfig;
use budgetcomm::enforcer::EnforcerMode;
use budgetcomm::env::EnvConfig;
use budgetcomm::oracle::{self, OracleConfig};
use budgetcomm::trainer::{self, run_training};
use budgetcomm::{Error, Result};

use crate::args::{Command, EvaluateArgs, OracleArgs, ReportArgs, RunArgs, SweepArgs, TrainArgs};
use crate::{report, sweep};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Evaluate(a) => evaluate(&a),
        Command::Oracle(a) => oracle_cmd(&a),
        Command::Sweep(a) => sweep_cmd(&a),
        Command::Report(a) => report_cmd(&a),
    }
}

/// Config from file or preset, with the flag shortcuts and overrides applied.
pub fn build_config(run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &run.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::for_env(run.env.as_deref().unwrap_or("tj-easy"))?,
    };
    if let (Some(_), Some(env)) = (&run.config, &run.env) {
        let preset = ExperimentConfig::for_env(env)?;
        cfg.env = preset.env;
        cfg.curriculum = preset.curriculum;
    }
    let mut ov = Vec::new();
    if let Some(m) = &run.mode {
        ov.push(format!("mode={m}"));
    }
    if let Some(b) = run.budget {
        ov.push(format!("budget.b={b}"));
    }
    if let Some(e) = &run.enforcer {
        let mode: EnforcerMode = e.parse()?;
        ov.push(format!("budget.mode={}", mode.name()));
    }
    if let Some(s) = run.seed {
        ov.push(format!("seeds=[{s}]"));
    }
    if let Some(out) = &run.out {
        ov.push(format!("out_dir={}", serde_json::to_string(&out.to_string_lossy())?));
    }
    ov.extend(run.overrides.iter().cloned());
    cfg.with_overrides(&ov)
}

/// Directory name for a config, e.g. `tj-easy-enforcer-soft-b0.3`.
pub fn run_name(cfg: &ExperimentConfig) -> String {
    let mode = serde_json::to_value(cfg.mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    let mut name = format!("{}-{mode}", cfg.env.name());
    if cfg.enforcer_name() != "none" {
        name.push_str(&format!("-{}-b{}", cfg.enforcer_name(), cfg.budget.b));
    }
    name
}

pub fn seed_dir(root: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    root.join(run_name(cfg)).join(format!("seed-{seed}"))
}

pub fn train(a: &TrainArgs) -> Result<Vec<PathBuf>> {
    let cfg = build_config(&a.run)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let root = PathBuf::from(&cfg.out_dir);
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(&root, &cfg, seed);
        let out = run_training(&cfg, seed, Some(&dir), resume.clone())?;
        let last = out.metrics.last();
        println!(
            "{} seed {seed}: {} epochs, final phase {}, success {:.3}, c {:.3}",
            dir.display(),
            last.map_or(0, |m| m.epoch + 1),
            out.checkpoint.curriculum.phase.name(),
            last.map_or(0.0, |m| m.success_rate),
            last.map_or(0.0, |m| m.c),
        );
        dirs.push(dir);
    }
    Ok(dirs)
}

fn write_or_print(json: &str, out: Option<&Path>) -> Result<()> {
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, format!("{json}\n"))?;
    }
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let report = trainer::evaluate(&ck, a.episodes, a.seed)?;
    write_or_print(&serde_json::to_string_pretty(&report)?, a.out.as_deref())
}

fn oracle_cmd(a: &OracleArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read oracle config {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid oracle config: {e}")))?
        }
        None => {
            let EnvConfig::TrafficJunction(env) = EnvConfig::preset(&a.env)? else {
                return Err(Error::config("the oracle only handles traffic junctions"));
            };
            let mut cfg = OracleConfig::new(env);
            cfg.history = a.history;
            if let Some(cap) = a.max_joint_plans {
                cfg.max_joint_plans = cap;
            }
            cfg
        }
    };
    let result = oracle::solve(&cfg)?;
    write_or_print(&serde_json::to_string_pretty(&result)?, a.out.as_deref())
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let cfg = build_config(&a.run)?;
    let axes = sweep::parse_grid(&a.grid)?;
    let root = PathBuf::from(&cfg.out_dir);
    let cells = sweep::run_sweep(&cfg, &axes, a.episodes, &root)?;
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    println!(
        "{} cells, {failed} with failures; table in {}",
        cells.len(),
        root.join("sweep.csv").display()
    );
    Ok(())
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let rep = report::build_report(&a.runs)?;
    let files = report::write_report(&rep, &a.out)?;
    if rep.skipped_lines > 0 {
        eprintln!("warning: skipped {} corrupt metrics lines", rep.skipped_lines);
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
