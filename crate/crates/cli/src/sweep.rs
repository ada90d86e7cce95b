//! Cross-product sweeps over config fields.

use std::fmt::Write as _;
use std::path::Path;

use budgetcomm::config::ExperimentConfig;
use budgetcomm::metrics::EpochMetrics;
use budgetcomm::trainer::{evaluate, run_training};
use budgetcomm::{Error, Result};

use crate::commands::seed_dir;
use crate::report::{convergence_epoch, CONVERGED, WINDOW};

#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parse `key=v1,v2,...` specs.
pub fn parse_grid<S: AsRef<str>>(specs: &[S]) -> Result<Vec<GridAxis>> {
    let mut axes = Vec::new();
    for spec in specs {
        let spec = spec.as_ref();
        let (key, vals) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("grid axis `{spec}` is not of the form key=v1,v2")))?;
        let values: Vec<String> = vals
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if key.is_empty() || values.is_empty() {
            return Err(Error::config(format!("grid axis `{spec}` has no key or no values")));
        }
        if axes.iter().any(|a: &GridAxis| a.key == key) {
            return Err(Error::config(format!("grid axis `{key}` given twice")));
        }
        axes.push(GridAxis {
            key: key.to_string(),
            values,
        });
    }
    if axes.is_empty() {
        return Err(Error::config("empty grid"));
    }
    Ok(axes)
}

/// Every assignment, first axis varying slowest.
pub fn cells(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub assignment: Vec<(String, String)>,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub success: Option<f64>,
    pub c: Option<f64>,
    pub reward: Option<f64>,
    pub convergence_epoch: Option<f64>,
    /// First failure in the cell, if any.
    pub error: Option<String>,
}

struct SeedResult {
    success: f64,
    c: f64,
    reward: f64,
    convergence: Option<usize>,
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, episodes: usize, root: &Path) -> Result<SeedResult> {
    let dir = seed_dir(root, cfg, seed);
    let out = run_training(cfg, seed, Some(&dir), None)?;
    let rep = evaluate(&out.checkpoint, episodes, seed)?;
    let metrics: &[EpochMetrics] = &out.metrics;
    Ok(SeedResult {
        success: rep.success_rate,
        c: rep.c,
        reward: rep.mean_reward,
        convergence: convergence_epoch(metrics, WINDOW, CONVERGED),
    })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Train and evaluate every cell and seed, recording failures per cell;
/// writes `sweep.csv` (and `sweep_pivot.csv` for two axes) under `root`.
pub fn run_sweep(base: &ExperimentConfig, axes: &[GridAxis], episodes: usize, root: &Path) -> Result<Vec<CellResult>> {
    let mut results = Vec::new();
    for cell in cells(axes) {
        let overrides: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let mut res = CellResult {
            assignment: cell.clone(),
            seeds_ok: 0,
            seeds_failed: 0,
            success: None,
            c: None,
            reward: None,
            convergence_epoch: None,
            error: None,
        };
        match base.with_overrides(&overrides) {
            Err(e) => {
                res.seeds_failed = base.seeds.len();
                res.error = Some(e.to_string());
            }
            Ok(cfg) => {
                let mut got = Vec::new();
                for &seed in &cfg.seeds {
                    match run_seed(&cfg, seed, episodes, root) {
                        Ok(r) => got.push(r),
                        Err(e) => {
                            log::warn!("sweep cell {overrides:?} seed {seed} failed: {e}");
                            res.seeds_failed += 1;
                            res.error.get_or_insert_with(|| format!("seed {seed}: {e}"));
                        }
                    }
                }
                res.seeds_ok = got.len();
                res.success = mean(&got.iter().map(|r| r.success).collect::<Vec<_>>());
                res.c = mean(&got.iter().map(|r| r.c).collect::<Vec<_>>());
                res.reward = mean(&got.iter().map(|r| r.reward).collect::<Vec<_>>());
                res.convergence_epoch = mean(
                    &got.iter()
                        .filter_map(|r| r.convergence.map(|e| e as f64))
                        .collect::<Vec<_>>(),
                );
            }
        }
        results.push(res);
    }
    std::fs::create_dir_all(root)?;
    std::fs::write(root.join("sweep.csv"), sweep_csv(axes, &results))?;
    if let Some(p) = pivot_csv(axes, &results) {
        std::fs::write(root.join("sweep_pivot.csv"), p)?;
    }
    Ok(results)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.4}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(axes: &[GridAxis], results: &[CellResult]) -> String {
    let mut s = String::new();
    for a in axes {
        s.push_str(&csv_field(&a.key));
        s.push(',');
    }
    s.push_str("seeds_ok,seeds_failed,success,c,reward,convergence_epoch,error\n");
    for r in results {
        for (_, v) in &r.assignment {
            s.push_str(&csv_field(v));
            s.push(',');
        }
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.seeds_ok,
            r.seeds_failed,
            fmt(r.success),
            fmt(r.c),
            fmt(r.reward),
            fmt(r.convergence_epoch),
            csv_field(r.error.as_deref().unwrap_or(""))
        );
    }
    s
}

/// Success as a table with the first axis down and the second across.
pub fn pivot_csv(axes: &[GridAxis], results: &[CellResult]) -> Option<String> {
    let [rows, cols] = axes else { return None };
    let mut s = format!("{} \\ {}", csv_field(&rows.key), csv_field(&cols.key));
    for c in &cols.values {
        s.push(',');
        s.push_str(&csv_field(c));
    }
    s.push('\n');
    for (i, rv) in rows.values.iter().enumerate() {
        s.push_str(&csv_field(rv));
        for j in 0..cols.values.len() {
            s.push(',');
            s.push_str(&fmt(results[i * cols.values.len() + j].success));
        }
        s.push('\n');
    }
    Some(s)
}
