//! Per-epoch metrics, one JSON object per line.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: String,
    pub env: String,
    pub mode: String,
    /// Enforcer the run ends in, `none` for runs without a budget.
    #[serde(default)]
    pub enforcer: String,
    #[serde(default)]
    pub budget: f64,
    pub seed: u64,
    pub success_rate: f64,
    /// Mean per-episode environment reward summed over agents.
    pub mean_reward: f64,
    /// Mean per-episode shaping summed over agents.
    pub mean_shaping: f64,
    pub c: f64,
    pub c_star: f64,
    pub c_hard: f64,
    #[serde(rename = "R_P")]
    pub r_p: f64,
    #[serde(rename = "R_D")]
    pub r_d: f64,
    #[serde(rename = "R_I")]
    pub r_i: f64,
    pub lr: f64,
    pub episodes: usize,
    pub alive_steps: usize,
    pub delivered: usize,
    pub attempted: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Not written, so identical runs produce identical files.
    #[serde(skip)]
    pub wall_ms: u64,
}

impl EpochMetrics {
    /// Same record with the timing field cleared.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

pub fn append_line<W: Write>(out: &mut W, m: &EpochMetrics) -> Result<()> {
    serde_json::to_writer(&mut *out, m)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Parsed lines and the number of lines that failed to parse.
pub fn read_metrics(path: &Path) -> Result<(Vec<EpochMetrics>, usize)> {
    let file = std::fs::File::open(path)?;
    let mut ok = Vec::new();
    let mut bad = 0;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EpochMetrics>(&line) {
            Ok(m) => ok.push(m),
            Err(e) => {
                log::warn!("skipping corrupt metrics line: {e}");
                bad += 1;
            }
        }
    }
    Ok((ok, bad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_skips_corrupt_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        let m = EpochMetrics {
            epoch: 3,
            phase: "OpenGate".into(),
            c: 1.0,
            r_p: 0.25,
            ..Default::default()
        };
        append_line(&mut f, &m).unwrap();
        writeln!(f, "{{not json").unwrap();
        append_line(&mut f, &m).unwrap();
        let (lines, bad) = read_metrics(&path).unwrap();
        assert_eq!(lines, vec![m.clone(), m]);
        assert_eq!(bad, 1);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"R_P\":0.25"));
    }
}
