//! Tables and plots computed from metrics files alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use budgetcomm::metrics::{read_metrics, EpochMetrics};
use budgetcomm::{Error, Result};

use crate::svg::{line_plot, Series};

/// Epochs averaged for windowed success and for final values.
pub const WINDOW: usize = 10;
pub const CONVERGED: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub path: PathBuf,
    pub label: String,
    pub env: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_success: f64,
    pub final_reward: f64,
    pub final_c: f64,
    /// First epoch whose trailing window averages at least 95% success.
    pub convergence_epoch: Option<usize>,
    /// Epochs trained after the open-gate phase, for enforcer runs.
    pub extra_epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub comm: Vec<Series>,
    pub success: Vec<Series>,
    pub skipped_lines: usize,
}

/// Row label matching the comparison tables.
pub fn label(m: &EpochMetrics) -> String {
    if m.mode == "Enforcer" {
        format!("Enforcer-{}-b{}", m.enforcer, m.budget)
    } else {
        m.mode.clone()
    }
}

fn label_rank(label: &str) -> usize {
    ["Fixed-Cts", "Fixed-Proto", "Gated-Cts", "Gated-Proto"]
        .iter()
        .position(|l| *l == label)
        .unwrap_or(4)
}

pub fn windowed_success(metrics: &[EpochMetrics], window: usize) -> Vec<f64> {
    (0..metrics.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(window);
            let w = &metrics[lo..=k];
            w.iter().map(|m| m.success_rate).sum::<f64>() / w.len() as f64
        })
        .collect()
}

pub fn convergence_epoch(metrics: &[EpochMetrics], window: usize, threshold: f64) -> Option<usize> {
    windowed_success(metrics, window)
        .iter()
        .enumerate()
        .find(|&(k, &s)| k + 1 >= window && s >= threshold)
        .map(|(k, _)| metrics[k].epoch)
}

fn tail_mean(metrics: &[EpochMetrics], f: impl Fn(&EpochMetrics) -> f64) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(WINDOW)..];
    tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
}

pub fn summarize(path: &Path, metrics: &[EpochMetrics]) -> Option<RunSummary> {
    let first = metrics.first()?;
    let last = metrics.last()?;
    let extra_epochs = (first.mode == "Enforcer")
        .then(|| metrics.iter().find(|m| m.phase != "OpenGate"))
        .flatten()
        .map(|m| last.epoch + 1 - m.epoch);
    Some(RunSummary {
        path: path.to_path_buf(),
        label: label(first),
        env: first.env.clone(),
        seed: first.seed,
        epochs: last.epoch + 1,
        final_success: tail_mean(metrics, |m| m.success_rate),
        final_reward: tail_mean(metrics, |m| m.mean_reward),
        final_c: tail_mean(metrics, |m| m.c),
        convergence_epoch: convergence_epoch(metrics, WINDOW, CONVERGED),
        extra_epochs,
    })
}

/// Metrics files named by the arguments, searching directories recursively.
pub fn collect_metric_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "metrics.jsonl") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if p.is_file() {
            out.push(p.clone());
        } else if p.is_dir() {
            walk(p, &mut out)?;
        } else {
            return Err(Error::config(format!("no such run directory or file: {}", p.display())));
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn build_report(paths: &[PathBuf]) -> Result<Report> {
    let files = collect_metric_files(paths)?;
    let mut rep = Report {
        runs: Vec::new(),
        comm: Vec::new(),
        success: Vec::new(),
        skipped_lines: 0,
    };
    for f in files {
        let (metrics, bad) = read_metrics(&f)?;
        rep.skipped_lines += bad;
        let Some(summary) = summarize(&f, &metrics) else {
            log::warn!("no usable metrics in {}", f.display());
            continue;
        };
        let name = format!("{} s{}", summary.label, summary.seed);
        rep.comm.push(Series {
            name: name.clone(),
            points: metrics.iter().map(|m| (m.epoch as f64, m.c)).collect(),
        });
        let ws = windowed_success(&metrics, WINDOW);
        rep.success.push(Series {
            name,
            points: metrics.iter().zip(ws).map(|(m, s)| (m.epoch as f64, s)).collect(),
        });
        rep.runs.push(summary);
    }
    if rep.runs.is_empty() {
        return Err(Error::Evaluation("no metrics found to report on".into()));
    }
    Ok(rep)
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn runs_csv(rep: &Report) -> String {
    let mut s =
        String::from("label,env,seed,epochs,final_success,final_reward,final_c,convergence_epoch,extra_epochs,path\n");
    for r in &rep.runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{:.4},{:.4},{},{},{}",
            r.label,
            r.env,
            r.seed,
            r.epochs,
            r.final_success,
            r.final_reward,
            r.final_c,
            opt(r.convergence_epoch),
            opt(r.extra_epochs.map(|e| format!("+{e}"))),
            r.path.display()
        );
    }
    s
}

fn groups(rep: &Report) -> BTreeMap<(String, usize, String), Vec<&RunSummary>> {
    let mut g: BTreeMap<_, Vec<&RunSummary>> = BTreeMap::new();
    for r in &rep.runs {
        g.entry((r.env.clone(), label_rank(&r.label), r.label.clone()))
            .or_default()
            .push(r);
    }
    g
}

/// One row per (env, label), averaged over seeds.
pub fn comparison_csv(rep: &Report) -> String {
    let mut s = String::from("env,label,seeds,success,reward,c,converged_seeds,convergence_epoch,extra_epochs\n");
    for ((env, _, label), runs) in groups(rep) {
        let conv: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.convergence_epoch.map(|e| e as f64))
            .collect();
        let extra = mean(runs.iter().filter_map(|r| r.extra_epochs.map(|e| e as f64)));
        let _ = writeln!(
            s,
            "{env},{label},{},{:.4},{:.4},{:.4},{},{},{}",
            runs.len(),
            mean(runs.iter().map(|r| r.final_success)).unwrap_or(0.0),
            mean(runs.iter().map(|r| r.final_reward)).unwrap_or(0.0),
            mean(runs.iter().map(|r| r.final_c)).unwrap_or(0.0),
            conv.len(),
            opt(mean(conv.into_iter()).map(|e| format!("{e:.1}"))),
            opt(extra.map(|e| format!("+{e:.1}"))),
        );
    }
    s
}

/// Reward gap between continuous and prototype messages, per environment.
pub fn gap_csv(rep: &Report) -> Option<String> {
    let g = groups(rep);
    let mut s = String::from("env,reward_cts,reward_proto,gap,success_cts,success_proto\n");
    let mut any = false;
    let envs: BTreeSet<&String> = g.keys().map(|k| &k.0).collect();
    for env in envs {
        let get = |label: &str| g.get(&(env.clone(), label_rank(label), label.to_string()));
        let (Some(c), Some(p)) = (get("Fixed-Cts"), get("Fixed-Proto")) else {
            continue;
        };
        any = true;
        let rc = mean(c.iter().map(|r| r.final_reward)).unwrap_or(0.0);
        let rp = mean(p.iter().map(|r| r.final_reward)).unwrap_or(0.0);
        let _ = writeln!(
            s,
            "{env},{rc:.4},{rp:.4},{:.4},{:.4},{:.4}",
            (rc - rp).abs(),
            mean(c.iter().map(|r| r.final_success)).unwrap_or(0.0),
            mean(p.iter().map(|r| r.final_success)).unwrap_or(0.0),
        );
    }
    any.then_some(s)
}

/// Write every table and plot into `out`; nothing is written on error.
pub fn write_report(rep: &Report, out: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(&str, String)> = vec![
        ("runs.csv", runs_csv(rep)),
        ("comparison.csv", comparison_csv(rep)),
        (
            "comm_fraction.svg",
            line_plot("Communication fraction", "epoch", "c", &rep.comm, Some((0.0, 1.0))),
        ),
        (
            "success.svg",
            line_plot("Windowed success", "epoch", "success", &rep.success, Some((0.0, 1.0))),
        ),
    ];
    if let Some(gap) = gap_csv(rep) {
        files.push(("gap.csv", gap));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (name, text) in files {
        let path = out.join(name);
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}
