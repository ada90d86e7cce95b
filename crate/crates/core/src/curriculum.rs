//! Training curriculum: open gate, reward full communication, enforce the
//! budget, taper the learning rate.

use serde::{Deserialize, Serialize};

use crate::enforcer::{BudgetConfig, EnforcerMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CurriculumPhase {
    OpenGate,
    MaxCommReward,
    SoftEnforce,
    HardEnforce,
    Taper,
    Done,
}

impl CurriculumPhase {
    pub const ALL: [CurriculumPhase; 6] = [
        Self::OpenGate,
        Self::MaxCommReward,
        Self::SoftEnforce,
        Self::HardEnforce,
        Self::Taper,
        Self::Done,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::OpenGate => "OpenGate",
            Self::MaxCommReward => "MaxCommReward",
            Self::SoftEnforce => "SoftEnforce",
            Self::HardEnforce => "HardEnforce",
            Self::Taper => "Taper",
            Self::Done => "Done",
        }
    }
}

/// How a phase wires the gate and the reward shaping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRegime {
    pub gate_open: bool,
    pub enforcer: EnforcerMode,
}

/// `last_enforcer` is the mode active before Taper (soft or hard).
pub fn phase_reward_mode(phase: CurriculumPhase, last_enforcer: EnforcerMode) -> PhaseRegime {
    use CurriculumPhase::*;
    let (gate_open, enforcer) = match phase {
        OpenGate => (true, EnforcerMode::None),
        MaxCommReward => (false, EnforcerMode::CommMax),
        SoftEnforce => (false, EnforcerMode::Soft),
        HardEnforce => (false, EnforcerMode::Hard),
        Taper | Done => (false, last_enforcer),
    };
    PhaseRegime { gate_open, enforcer }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseCriteria {
    /// Windowed success needed to leave OpenGate and MaxCommReward.
    pub success_threshold: f64,
    /// Used instead of success when set (predator-prey).
    pub reward_threshold: Option<f64>,
    pub window: usize,
    pub epsilon: f64,
    pub min_comm: f64,
    pub plateau_dc: f64,
    pub plateau_dreward: f64,
    pub taper_factor: f64,
    pub taper_floor: f64,
    pub taper_epochs: usize,
    /// Epochs an enforcing phase runs before it may end, unless forced.
    pub min_enforce_epochs: usize,
    /// Force the next transition after this many epochs in one phase
    /// (not applied to MaxCommReward).
    pub max_phase_epochs: Option<usize>,
}

impl Default for PhaseCriteria {
    fn default() -> Self {
        Self {
            success_threshold: 0.95,
            reward_threshold: None,
            window: 10,
            epsilon: 0.05,
            min_comm: 0.9,
            plateau_dc: 0.01,
            plateau_dreward: 0.01,
            taper_factor: 0.5,
            taper_floor: 1e-5,
            taper_epochs: 10,
            min_enforce_epochs: 100,
            max_phase_epochs: None,
        }
    }
}

impl PhaseCriteria {
    pub fn for_env(is_traffic_medium: bool) -> Self {
        Self {
            success_threshold: if is_traffic_medium { 0.90 } else { 0.95 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(self.success_threshold > 0.0 && self.success_threshold <= 1.0) {
            return Err(crate::Error::config("success_threshold must lie in (0, 1]"));
        }
        if self.window == 0 {
            return Err(crate::Error::config("curriculum window must be at least 1"));
        }
        if !(self.taper_factor > 0.0 && self.taper_factor < 1.0) {
            return Err(crate::Error::config("taper_factor must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0) || !(self.taper_floor > 0.0) {
            return Err(crate::Error::config("epsilon and taper_floor must be positive"));
        }
        Ok(())
    }
}

/// One epoch as seen by the phase machine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub success_rate: f64,
    pub mean_reward: f64,
    pub c: f64,
    pub c_hard: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Windowed view of the most recent epochs of the current phase.
#[derive(Clone, Copy, Debug)]
pub struct WindowStats<'a> {
    pub epochs: &'a [EpochSummary],
}

impl WindowStats<'_> {
    fn recent(&self, w: usize) -> &[EpochSummary] {
        &self.epochs[self.epochs.len().saturating_sub(w)..]
    }

    pub fn success(&self, w: usize) -> f64 {
        mean(self.recent(w).iter().map(|e| e.success_rate))
    }

    pub fn reward(&self, w: usize) -> f64 {
        mean(self.recent(w).iter().map(|e| e.mean_reward))
    }

    pub fn c(&self, w: usize) -> f64 {
        mean(self.recent(w).iter().map(|e| e.c))
    }

    pub fn c_hard(&self, w: usize) -> f64 {
        mean(self.recent(w).iter().map(|e| e.c_hard))
    }

    /// Performance criterion: success for traffic, reward when a reward
    /// threshold is configured.
    pub fn performs(&self, crit: &PhaseCriteria) -> bool {
        match crit.reward_threshold {
            Some(r) => self.reward(crit.window) >= r,
            None => self.success(crit.window) >= crit.success_threshold,
        }
    }

    /// Two consecutive windows agree in c and reward.
    pub fn plateaued(&self, crit: &PhaseCriteria) -> bool {
        let w = crit.window;
        if self.epochs.len() < 2 * w {
            return false;
        }
        let n = self.epochs.len();
        let prev = WindowStats {
            epochs: &self.epochs[n - 2 * w..n - w],
        };
        let dc = (self.c(w) - prev.c(w)).abs();
        let r_now = self.reward(w);
        let r_prev = prev.reward(w);
        let dr = (r_now - r_prev).abs() / r_prev.abs().max(1e-8);
        dc < crit.plateau_dc && dr < crit.plateau_dreward
    }
}

/// Controller state consulted once per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub phase: CurriculumPhase,
    pub epochs_in_phase: usize,
    pub taper_steps: usize,
    pub last_enforcer: EnforcerMode,
    pub history: Vec<EpochSummary>,
    /// `(epoch, phase)` at which each phase was entered.
    pub transitions: Vec<(usize, CurriculumPhase)>,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            phase: CurriculumPhase::OpenGate,
            epochs_in_phase: 0,
            taper_steps: 0,
            last_enforcer: EnforcerMode::Soft,
            history: Vec::new(),
            transitions: vec![(0, CurriculumPhase::OpenGate)],
        }
    }
}

/// Pure transition rule.
pub fn advance(
    phase: CurriculumPhase,
    window: WindowStats<'_>,
    crit: &PhaseCriteria,
    budget: &BudgetConfig,
    epochs_in_phase: usize,
    taper_steps: usize,
) -> CurriculumPhase {
    use CurriculumPhase::*;
    if phase == Done {
        return Done;
    }
    if phase == Taper {
        return if taper_steps >= crit.taper_epochs { Done } else { Taper };
    }
    if window.epochs.len() < crit.window {
        return phase;
    }
    let forced = crit.max_phase_epochs.is_some_and(|m| epochs_in_phase >= m);
    let after_max_comm = || match budget.mode {
        EnforcerMode::Hard => HardEnforce,
        EnforcerMode::Soft => SoftEnforce,
        _ => Taper,
    };
    let w = crit.window;
    let dwelt = epochs_in_phase >= crit.min_enforce_epochs;
    let settled = dwelt && window.plateaued(crit);
    match phase {
        OpenGate if window.performs(crit) || forced => MaxCommReward,
        // never forced: leaving requires near-full communication
        MaxCommReward if window.performs(crit) && window.c(w) >= crit.min_comm => after_max_comm(),
        SoftEnforce => {
            let near = (window.c(w) - budget.b).abs() <= crit.epsilon;
            if near && dwelt && (window.performs(crit) || settled) {
                Taper
            } else if (!near && settled) || forced {
                HardEnforce
            } else {
                phase
            }
        }
        HardEnforce => {
            let near = (window.c_hard(w) - budget.b).abs() <= crit.epsilon;
            if (near && dwelt && window.performs(crit)) || settled || forced {
                Taper
            } else {
                phase
            }
        }
        other => other,
    }
}

pub fn taper_lr(current: f64, factor: f64, floor: f64) -> f64 {
    (current * factor).max(floor)
}

impl Curriculum {
    /// Start directly in `phase` (used for baselines and resumed runs).
    pub fn starting_at(phase: CurriculumPhase) -> Self {
        Self {
            phase,
            transitions: vec![(0, phase)],
            ..Self::default()
        }
    }

    pub fn regime(&self) -> PhaseRegime {
        phase_reward_mode(self.phase, self.last_enforcer)
    }

    /// Swap the phase just entered from MaxCommReward for the one `mode`
    /// would have chosen. Only valid before any epoch of that phase ran.
    pub fn retarget(&mut self, mode: EnforcerMode) -> crate::Result<()> {
        let n = self.transitions.len();
        let fresh = self.epochs_in_phase == 0 && n >= 2 && self.transitions[n - 2].1 == CurriculumPhase::MaxCommReward;
        if !fresh {
            return Err(crate::Error::Checkpoint(
                "checkpoint was not taken as the curriculum left MaxCommReward".into(),
            ));
        }
        let next = match mode {
            EnforcerMode::Hard => CurriculumPhase::HardEnforce,
            EnforcerMode::Soft => CurriculumPhase::SoftEnforce,
            _ => CurriculumPhase::Taper,
        };
        self.phase = next;
        self.last_enforcer = if mode == EnforcerMode::Hard {
            EnforcerMode::Hard
        } else {
            Curriculum::default().last_enforcer
        };
        self.transitions[n - 1].1 = next;
        Ok(())
    }

    /// Record an epoch, taper the learning rate when in Taper, and move to
    /// the next phase if the criteria say so. Returns the new phase when a
    /// transition happened.
    pub fn observe(
        &mut self,
        epoch: usize,
        summary: EpochSummary,
        crit: &PhaseCriteria,
        budget: &BudgetConfig,
        lr: &mut f64,
    ) -> Option<CurriculumPhase> {
        self.history.push(summary);
        self.epochs_in_phase += 1;
        if self.phase == CurriculumPhase::Taper {
            *lr = taper_lr(*lr, crit.taper_factor, crit.taper_floor);
            self.taper_steps += 1;
        }
        let start = self.history.len() - self.epochs_in_phase;
        let window = WindowStats {
            epochs: &self.history[start..],
        };
        let next = advance(self.phase, window, crit, budget, self.epochs_in_phase, self.taper_steps);
        if next == self.phase {
            return None;
        }
        if matches!(self.phase, CurriculumPhase::SoftEnforce | CurriculumPhase::HardEnforce) {
            self.last_enforcer = self.regime().enforcer;
        }
        if next == CurriculumPhase::HardEnforce {
            self.last_enforcer = EnforcerMode::Hard;
        }
        self.phase = next;
        self.epochs_in_phase = 0;
        self.transitions.push((epoch + 1, next));
        Some(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use CurriculumPhase::*;

    #[test]
    fn retarget_only_right_after_max_comm() {
        let mut c = Curriculum::default();
        assert!(c.retarget(EnforcerMode::Hard).is_err());
        c.transitions.push((5, MaxCommReward));
        c.transitions.push((9, SoftEnforce));
        c.phase = SoftEnforce;
        c.retarget(EnforcerMode::Hard).unwrap();
        assert_eq!(c.phase, HardEnforce);
        assert_eq!(c.last_enforcer, EnforcerMode::Hard);
        assert_eq!(c.transitions.last(), Some(&(9, HardEnforce)));
        c.retarget(EnforcerMode::Soft).unwrap();
        assert_eq!(c.phase, SoftEnforce);
        assert_eq!(c.regime().enforcer, EnforcerMode::Soft);
        c.epochs_in_phase = 1;
        assert!(c.retarget(EnforcerMode::Hard).is_err());
    }

    fn epochs(n: usize, success: f64, c: f64) -> Vec<EpochSummary> {
        vec![
            EpochSummary {
                success_rate: success,
                mean_reward: -1.0,
                c,
                c_hard: c,
            };
            n
        ]
    }

    fn step(phase: CurriculumPhase, e: &[EpochSummary], b: f64) -> CurriculumPhase {
        let budget = BudgetConfig::with_budget(EnforcerMode::Soft, b);
        advance(
            phase,
            WindowStats { epochs: e },
            &PhaseCriteria::default(),
            &budget,
            e.len(),
            0,
        )
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(step(OpenGate, &epochs(10, 0.96, 1.0), 0.3), MaxCommReward);
        assert_eq!(step(OpenGate, &epochs(10, 0.90, 1.0), 0.3), OpenGate);
        assert_eq!(step(OpenGate, &epochs(9, 1.0, 1.0), 0.3), OpenGate);
        assert_eq!(step(SoftEnforce, &epochs(100, 0.98, 0.28), 0.3), Taper);
        // near the budget but still inside the minimum dwell
        assert_eq!(step(SoftEnforce, &epochs(10, 0.98, 0.28), 0.3), SoftEnforce);
        // plateaued far from the budget, after the minimum dwell
        assert_eq!(step(SoftEnforce, &epochs(100, 0.98, 0.25), 0.1), HardEnforce);
        assert_eq!(step(SoftEnforce, &epochs(99, 0.98, 0.25), 0.1), SoftEnforce);
        assert_eq!(step(SoftEnforce, &epochs(10, 0.98, 0.25), 0.1), SoftEnforce);
        assert_eq!(step(HardEnforce, &epochs(30, 0.70, 0.1), 0.1), HardEnforce);
        assert_eq!(step(HardEnforce, &epochs(30, 0.97, 0.1), 0.1), HardEnforce);
        assert_eq!(step(HardEnforce, &epochs(100, 0.97, 0.1), 0.1), Taper);
    }

    #[test]
    fn max_comm_needs_ninety_percent() {
        assert_eq!(step(MaxCommReward, &epochs(10, 0.99, 0.85), 0.3), MaxCommReward);
        assert_eq!(step(MaxCommReward, &epochs(10, 0.99, 0.92), 0.3), SoftEnforce);
        let hard = BudgetConfig::with_budget(EnforcerMode::Hard, 0.1);
        let e = epochs(10, 0.99, 0.95);
        let next = advance(
            MaxCommReward,
            WindowStats { epochs: &e },
            &PhaseCriteria::default(),
            &hard,
            10,
            0,
        );
        assert_eq!(next, HardEnforce);
    }

    #[test]
    fn forced_fallback() {
        let crit = PhaseCriteria {
            max_phase_epochs: Some(30),
            ..PhaseCriteria::default()
        };
        let budget = BudgetConfig::with_budget(EnforcerMode::Soft, 0.3);
        let e = epochs(30, 0.2, 1.0);
        assert_eq!(
            advance(OpenGate, WindowStats { epochs: &e }, &crit, &budget, 30, 0),
            MaxCommReward
        );
        assert_eq!(
            advance(OpenGate, WindowStats { epochs: &e }, &crit, &budget, 29, 0),
            OpenGate
        );
    }

    #[test]
    fn taper_examples() {
        assert_eq!(taper_lr(0.001, 0.5, 1e-5), 0.0005);
        assert_eq!(taper_lr(1e-5, 0.5, 1e-5), 1e-5);
        let mut lr = 0.001;
        let mut reached = None;
        for k in 1..=10 {
            lr = taper_lr(lr, 0.5, 1e-5);
            if lr == 1e-5 && reached.is_none() {
                reached = Some(k);
            }
        }
        assert_eq!(lr, 1e-5);
        assert_eq!(reached, Some(7));
    }

    #[test]
    fn regime_is_pure_function_of_phase() {
        for phase in CurriculumPhase::ALL {
            for last in [EnforcerMode::Soft, EnforcerMode::Hard] {
                let r = phase_reward_mode(phase, last);
                assert_eq!(r, phase_reward_mode(phase, last));
                assert_eq!(r.gate_open, phase == OpenGate);
                let expect = match phase {
                    OpenGate => EnforcerMode::None,
                    MaxCommReward => EnforcerMode::CommMax,
                    SoftEnforce => EnforcerMode::Soft,
                    HardEnforce => EnforcerMode::Hard,
                    Taper | Done => last,
                };
                assert_eq!(r.enforcer, expect);
            }
        }
    }

    #[test]
    fn full_run_is_monotone_and_tapers() {
        let crit = PhaseCriteria::default();
        let budget = BudgetConfig::with_budget(EnforcerMode::Soft, 0.3);
        let mut cur = Curriculum::default();
        let mut lr = 0.001;
        let mut seen = vec![cur.phase];
        for epoch in 0..200 {
            let c = match cur.phase {
                OpenGate | MaxCommReward => 1.0,
                _ => 0.3,
            };
            let s = EpochSummary {
                success_rate: 0.99,
                mean_reward: -1.0,
                c,
                c_hard: c,
            };
            if let Some(p) = cur.observe(epoch, s, &crit, &budget, &mut lr) {
                assert!(p > *seen.last().unwrap());
                seen.push(p);
            }
        }
        assert_eq!(seen, vec![OpenGate, MaxCommReward, SoftEnforce, Taper, Done]);
        assert_eq!(lr, 1e-5);
        assert_eq!(cur.last_enforcer, EnforcerMode::Soft);
    }
}
