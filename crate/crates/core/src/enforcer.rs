//! Communication reward shapers and budget accounting.
//!
//! Fractions are always "delivered communications / alive agent-steps".
//! Penalties are returned as nonnegative-ish magnitudes; callers subtract
//! `outer_lambda · penalty` from every alive agent-step of the episode.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnforcerMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "commMax", alias = "commmax")]
    CommMax,
    #[serde(rename = "soft")]
    Soft,
    #[serde(rename = "hard")]
    Hard,
}

impl EnforcerMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::CommMax => "commMax",
            Self::Soft => "soft",
            Self::Hard => "hard",
        }
    }
}

impl std::str::FromStr for EnforcerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "commmax" => Ok(Self::CommMax),
            "soft" => Ok(Self::Soft),
            "hard" => Ok(Self::Hard),
            other => Err(Error::config(format!("unknown enforcer mode `{other}`"))),
        }
    }
}

/// Sign of the proportional term above budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProportionalSign {
    /// `(c − b)/(1 − b)` above budget, so over-use is penalized.
    Symmetric,
    /// `(b − c)/(1 − b)` above budget, as literally written.
    Verbatim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub b: f64,
    pub mode: EnforcerMode,
    /// Outer weights per shaping mode.
    pub lambda_comm_max: f64,
    pub lambda_soft: f64,
    pub lambda_hard: f64,
    pub gain_p: f64,
    pub gain_d: f64,
    pub gain_i: f64,
    pub clamp_k: f64,
    pub epsilon: f64,
    pub random_mask_range: [f64; 2],
    pub proportional_sign: ProportionalSign,
    /// Hard mode: also keep the episode's running delivered fraction at or
    /// below `b`, so the evaluated fraction can never exceed the budget even
    /// when agents live shorter than the episode.
    pub pacing: bool,
    /// Subtract the batch-mean episode penalty from the shaping.
    pub center_shaping: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            b: 1.0,
            mode: EnforcerMode::None,
            lambda_comm_max: 0.1,
            lambda_soft: 1.0,
            lambda_hard: 0.1,
            gain_p: 1.0,
            gain_d: 1.6,
            gain_i: 0.026,
            clamp_k: 0.1,
            epsilon: 0.05,
            random_mask_range: [0.0, 0.3],
            proportional_sign: ProportionalSign::Symmetric,
            pacing: true,
            center_shaping: true,
        }
    }
}

impl BudgetConfig {
    pub fn with_budget(mode: EnforcerMode, b: f64) -> Self {
        Self {
            b,
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0 && self.b <= 1.0) {
            return Err(Error::config(format!("budget b must lie in (0, 1], got {}", self.b)));
        }
        if !(self.clamp_k > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::config("clamp K and tolerance ε must be positive"));
        }
        if [self.gain_p, self.gain_d, self.gain_i].iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::config("enforcer gains must be nonnegative"));
        }
        if [self.lambda_comm_max, self.lambda_soft, self.lambda_hard]
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            return Err(Error::config("outer λ weights must be finite and nonnegative"));
        }
        let [lo, hi] = self.random_mask_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config("random_mask_range must satisfy 0 ≤ lo ≤ hi ≤ 1"));
        }
        if self.mode == EnforcerMode::Soft && self.b >= 1.0 {
            return Err(Error::config("soft enforcer needs b < 1"));
        }
        Ok(())
    }

    pub fn outer_lambda(&self, mode: EnforcerMode) -> f64 {
        match mode {
            EnforcerMode::None => 0.0,
            EnforcerMode::CommMax => self.lambda_comm_max,
            EnforcerMode::Soft => self.lambda_soft,
            EnforcerMode::Hard => self.lambda_hard,
        }
    }
}

fn check_fraction(name: &str, c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(Error::contract(format!("{name} must lie in [0, 1], got {c}")))
    }
}

pub fn comm_max_penalty(c: f64) -> Result<f64> {
    check_fraction("c", c)?;
    Ok((1.0 - c).abs())
}

pub fn soft_p_term(b: f64, c: f64, sign: ProportionalSign) -> Result<f64> {
    if b <= 0.0 || b >= 1.0 {
        return Err(Error::config(format!("proportional term undefined for b = {b}")));
    }
    check_fraction("c", c)?;
    Ok(if c <= b {
        (b - c) / b
    } else {
        match sign {
            ProportionalSign::Symmetric => (c - b) / (1.0 - b),
            ProportionalSign::Verbatim => (b - c) / (1.0 - b),
        }
    })
}

pub fn soft_d_term(rp_now: f64, rp_prev: f64) -> f64 {
    rp_now - rp_prev
}

/// Per-epoch communication statistics plus the controller memory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochCommStats {
    pub c: f64,
    pub c_star: f64,
    pub c_hard: f64,
    pub prev_rp: f64,
    pub integral: f64,
    /// Derivative and integral values carried into the next epoch's shaping.
    pub rd: f64,
    pub ri: f64,
}

pub fn soft_i_term(stats: &mut EpochCommStats, rp_now: f64, k: f64) -> f64 {
    stats.integral = (stats.integral + rp_now).clamp(-k, k);
    stats.integral
}

/// Weighted P/D/I sum.
pub fn soft_penalty(rp: f64, rd: f64, ri: f64, cfg: &BudgetConfig) -> f64 {
    cfg.gain_p * rp + cfg.gain_d * rd + cfg.gain_i * ri
}

impl EpochCommStats {
    /// Close an epoch: record fractions and advance the P/D/I memory.
    /// Returns the epoch-level `(R_P, R_D, R_I)`.
    pub fn close_epoch(&mut self, c: f64, c_star: f64, c_hard: f64, cfg: &BudgetConfig) -> Result<(f64, f64, f64)> {
        self.c = c;
        self.c_star = c_star;
        self.c_hard = c_hard;
        if cfg.b >= 1.0 {
            return Ok((0.0, 0.0, 0.0));
        }
        let rp = soft_p_term(cfg.b, c.clamp(0.0, 1.0), cfg.proportional_sign)?;
        let rd = soft_d_term(rp, self.prev_rp);
        let ri = soft_i_term(self, rp, cfg.clamp_k);
        self.prev_rp = rp;
        self.rd = rd;
        self.ri = ri;
        Ok((rp, rd, ri))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBucket {
    pub capacity: usize,
    pub tokens: usize,
}

impl TokenBucket {
    pub fn new(b: f64, horizon: usize) -> Self {
        let capacity = (b * horizon as f64 + 1e-9).floor() as usize;
        let capacity = capacity.min(horizon);
        Self {
            capacity,
            tokens: capacity,
        }
    }

    pub fn try_take(&mut self) -> bool {
        if self.tokens > 0 {
            self.tokens -= 1;
            true
        } else {
            false
        }
    }
}

/// Mask one agent's attempt sequence through its bucket.
pub fn hard_mask(
    attempts: &[bool],
    bucket: &mut TokenBucket,
    random_mask_prob: f64,
    rng: &mut Rng,
    training: bool,
) -> Vec<bool> {
    attempts
        .iter()
        .map(|&a| {
            if !a || !bucket.try_take() {
                return false;
            }
            !(training && random_mask_prob > 0.0 && rng.gen::<f64>() < random_mask_prob)
        })
        .collect()
}

pub fn hard_penalty(c_star: f64, c_hard: f64) -> Result<f64> {
    check_fraction("c*", c_star)?;
    check_fraction("c_hard", c_hard)?;
    if c_hard > c_star + 1e-12 {
        return Err(Error::contract(format!("c_hard {c_hard} exceeds c* {c_star}")));
    }
    Ok((c_hard - c_star).abs())
}

/// Per-episode hard-mode state shared by all agent slots.
#[derive(Clone, Debug)]
pub struct EpisodeMasker {
    buckets: Vec<TokenBucket>,
    mask_prob: f64,
    pace: Option<f64>,
    training: bool,
    delivered: usize,
    alive_steps: usize,
}

impl EpisodeMasker {
    /// Draws the episode's random-mask probability when `training`.
    pub fn new(cfg: &BudgetConfig, n_agents: usize, horizon: usize, training: bool, rng: &mut Rng) -> Self {
        let [lo, hi] = cfg.random_mask_range;
        let mask_prob = if training && hi > lo {
            rng.gen_range(lo..hi)
        } else if training {
            lo
        } else {
            0.0
        };
        Self {
            buckets: vec![TokenBucket::new(cfg.b, horizon); n_agents],
            mask_prob,
            pace: cfg.pacing.then_some(cfg.b),
            training,
            delivered: 0,
            alive_steps: 0,
        }
    }

    pub fn mask_prob(&self) -> f64 {
        self.mask_prob
    }

    /// A fresh occupant of `slot` gets a full bucket.
    pub fn respawn(&mut self, slot: usize) {
        let cap = self.buckets[slot].capacity;
        self.buckets[slot].tokens = cap;
    }

    /// Mask one timestep. `attempts[i]` is ignored for dead slots.
    pub fn step(&mut self, attempts: &[bool], alive: &[bool], rng: &mut Rng) -> Vec<bool> {
        self.alive_steps += alive.iter().filter(|a| **a).count();
        let mut out = vec![false; attempts.len()];
        for i in 0..attempts.len() {
            if !alive[i] || !attempts[i] {
                continue;
            }
            if let Some(b) = self.pace {
                let allowed = (b * self.alive_steps as f64 + 1e-9).floor() as usize;
                if self.delivered + 1 > allowed {
                    continue;
                }
            }
            if !self.buckets[i].try_take() {
                continue;
            }
            if self.training && self.mask_prob > 0.0 && rng.gen::<f64>() < self.mask_prob {
                continue;
            }
            self.delivered += 1;
            out[i] = true;
        }
        out
    }
}

/// Episode-level shaping penalty (before the outer λ) for a given mode.
pub fn episode_penalty(
    mode: EnforcerMode,
    cfg: &BudgetConfig,
    stats: &EpochCommStats,
    c_star: f64,
    c_hard: f64,
) -> Result<f64> {
    match mode {
        EnforcerMode::None => Ok(0.0),
        EnforcerMode::CommMax => comm_max_penalty(c_hard),
        EnforcerMode::Soft => {
            let rp = soft_p_term(cfg.b, c_hard, cfg.proportional_sign)?;
            Ok(soft_penalty(rp, stats.rd, stats.ri, cfg))
        }
        EnforcerMode::Hard => hard_penalty(c_star, c_hard),
    }
}
