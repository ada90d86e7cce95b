//! Cooperative predator-prey on a square grid with a stationary prey.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{DecPomdpSpec, StepInfo, StepResult};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// up, down, left, right, stay
pub const PP_ACTIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredatorPreyConfig {
    pub size: usize,
    pub predators: usize,
    pub vision: usize,
    pub step_penalty: f64,
    pub on_prey_reward: f64,
    pub cooperative: bool,
    pub max_steps: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    1.0
}

impl PredatorPreyConfig {
    pub fn small() -> Self {
        PredatorPreyConfig {
            size: 5,
            predators: 3,
            vision: 1,
            step_penalty: 0.05,
            on_prey_reward: 0.05,
            cooperative: true,
            max_steps: 20,
            gamma: 1.0,
        }
    }

    pub fn large() -> Self {
        PredatorPreyConfig {
            size: 10,
            predators: 5,
            max_steps: 40,
            ..Self::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.predators == 0 {
            return Err(Error::config("predator-prey needs at least one predator"));
        }
        if self.size < 2 || self.predators + 1 > self.size * self.size {
            return Err(Error::config("grid too small for the predators and the prey"));
        }
        if self.vision != 1 {
            return Err(Error::config("only vision radius 1 is supported"));
        }
        if !self.cooperative {
            return Err(Error::config("only the cooperative mode is supported"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Window channels per cell: empty, wall, other predator, prey.
const CHANNELS: usize = 4;
const WINDOW: usize = 3;

#[derive(Clone, Debug)]
pub struct PredatorPrey {
    cfg: PredatorPreyConfig,
    predators: Vec<(usize, usize)>,
    prey: (usize, usize),
    t: usize,
    done: bool,
}

impl PredatorPrey {
    pub fn new(cfg: PredatorPreyConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PredatorPrey {
            predators: vec![(0, 0); cfg.predators],
            prey: (0, 0),
            cfg,
            t: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &PredatorPreyConfig {
        &self.cfg
    }

    pub fn obs_dim(&self) -> usize {
        WINDOW * WINDOW * CHANNELS + self.cfg.size * self.cfg.size
    }

    pub fn spec(&self) -> DecPomdpSpec {
        DecPomdpSpec {
            n_agents: self.cfg.predators,
            action_sizes: vec![PP_ACTIONS; self.cfg.predators],
            obs_dim: self.obs_dim(),
            max_steps: self.cfg.max_steps,
            gamma: self.cfg.gamma,
        }
    }

    pub fn predators(&self) -> &[(usize, usize)] {
        &self.predators
    }

    pub fn prey(&self) -> (usize, usize) {
        self.prey
    }

    /// Overwrite positions; used by tests.
    pub fn set_positions(&mut self, predators: &[(usize, usize)], prey: (usize, usize)) {
        self.predators = predators.to_vec();
        self.prey = prey;
    }

    pub fn reset(&mut self, rng: &mut Rng) -> StepResult {
        let n = self.cfg.size;
        let cells = sample(rng, n * n, self.cfg.predators + 1);
        let mut it = cells.iter().map(|c| (c / n, c % n));
        self.prey = it.next().expect("sampled at least one cell");
        self.predators = it.collect();
        self.t = 0;
        self.done = false;
        let k = self.predators.len();
        StepResult {
            obs: (0..k).map(|i| self.observe(i)).collect(),
            rewards: vec![0.0; k],
            alive: vec![true; k],
            spawned: vec![true; k],
            done: false,
            info: StepInfo::default(),
        }
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        let k = self.predators.len();
        if self.done {
            return Err(Error::contract("step called on a finished episode"));
        }
        if actions.len() != k {
            return Err(Error::contract(format!("expected {k} actions, got {}", actions.len())));
        }
        let last = self.cfg.size - 1;
        for (p, &a) in self.predators.iter_mut().zip(actions) {
            *p = match a {
                0 => (p.0.saturating_sub(1), p.1),
                1 => ((p.0 + 1).min(last), p.1),
                2 => (p.0, p.1.saturating_sub(1)),
                3 => (p.0, (p.1 + 1).min(last)),
                4 => *p,
                _ => return Err(Error::contract(format!("predator action {a} out of range"))),
            };
        }
        let on_prey = self.predators.iter().filter(|&&p| p == self.prey).count();
        let r = if on_prey == 0 {
            -self.cfg.step_penalty
        } else {
            self.cfg.on_prey_reward * on_prey as f64
        };
        self.t += 1;
        self.done = self.t >= self.cfg.max_steps;
        Ok(StepResult {
            obs: (0..k).map(|i| self.observe(i)).collect(),
            rewards: vec![r; k],
            alive: vec![true; k],
            spawned: vec![false; k],
            done: self.done,
            info: StepInfo { collisions: 0, on_prey },
        })
    }

    /// `[3×3 window × (empty, wall, predator, prey) | own position one-hot]`.
    /// The centre cell's predator channel ignores the observer itself.
    pub fn observe(&self, agent: usize) -> Vec<f64> {
        let n = self.cfg.size as isize;
        let mut obs = vec![0.0; self.obs_dim()];
        let Some(&(r, c)) = self.predators.get(agent) else {
            return obs;
        };
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let cell = ((dr + 1) * WINDOW as isize + (dc + 1)) as usize;
                let base = cell * CHANNELS;
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < 0 || cc < 0 || rr >= n || cc >= n {
                    obs[base + 1] = 1.0;
                    continue;
                }
                let pos = (rr as usize, cc as usize);
                let other = self.predators.iter().enumerate().any(|(j, &p)| j != agent && p == pos);
                let prey = self.prey == pos;
                if other {
                    obs[base + 2] = 1.0;
                }
                if prey {
                    obs[base + 3] = 1.0;
                }
                if !other && !prey {
                    obs[base] = 1.0;
                }
            }
        }
        obs[WINDOW * WINDOW * CHANNELS + r * self.cfg.size + c] = 1.0;
        obs
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({ "t": self.t, "predators": self.predators, "prey": self.prey })
    }
}

/// Centres of 3×3 windows covering an `n × n` grid, one per ⌈n/3⌉² tile.
pub fn covering_windows(n: usize) -> Vec<(usize, usize)> {
    let per_axis = n.div_ceil(WINDOW);
    let centre = |i: usize| (WINDOW * i + 1).min(n - 1);
    (0..per_axis)
        .flat_map(|i| (0..per_axis).map(move |j| (centre(i), centre(j))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn reset_places_distinct_cells() {
        let mut pp = PredatorPrey::new(PredatorPreyConfig::small()).unwrap();
        for seed in 0..50 {
            pp.reset(&mut rng::seeded(seed));
            let mut all = pp.predators().to_vec();
            all.push(pp.prey());
            assert_eq!(all.len(), 4);
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 4);
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = PredatorPrey::new(PredatorPreyConfig::large()).unwrap();
        let mut b = PredatorPrey::new(PredatorPreyConfig::large()).unwrap();
        assert_eq!(a.reset(&mut rng::seeded(9)), b.reset(&mut rng::seeded(9)));
    }

    #[test]
    fn reaching_prey_rewards_everyone() {
        let mut pp = PredatorPrey::new(PredatorPreyConfig::small()).unwrap();
        pp.reset(&mut rng::seeded(0));
        pp.set_positions(&[(2, 1), (0, 0), (4, 4)], (2, 2));
        let r = pp.step(&[3, 4, 4]).unwrap();
        assert_eq!(r.info.on_prey, 1);
        assert!(r.rewards.iter().all(|&x| (x - 0.05).abs() < 1e-12));
        let r = pp.step(&[4, 4, 4]).unwrap();
        assert!(r.rewards.iter().all(|&x| (x - 0.05).abs() < 1e-12));
    }

    #[test]
    fn step_penalty_without_prey_and_wall_clipping() {
        let mut pp = PredatorPrey::new(PredatorPreyConfig::small()).unwrap();
        pp.reset(&mut rng::seeded(0));
        pp.set_positions(&[(0, 0), (4, 4), (0, 4)], (2, 2));
        let r = pp.step(&[0, 1, 3]).unwrap();
        assert_eq!(pp.predators(), &[(0, 0), (4, 4), (0, 4)]);
        assert!(r.rewards.iter().all(|&x| (x + 0.05).abs() < 1e-12));
        assert!(matches!(pp.step(&[5, 0, 0]), Err(Error::Contract(_))));
    }

    #[test]
    fn prey_visible_in_window() {
        let mut pp = PredatorPrey::new(PredatorPreyConfig::small()).unwrap();
        pp.set_positions(&[(1, 1), (4, 4), (4, 0)], (2, 2));
        let obs = pp.observe(0);
        let prey_channel: f64 = (0..9).map(|c| obs[c * 4 + 3]).sum();
        assert_eq!(prey_channel, 1.0);
        let far = pp.observe(1);
        assert_eq!((0..9).map(|c| far[c * 4 + 3]).sum::<f64>(), 0.0);
        // corner agent sees five wall cells
        assert_eq!((0..9).map(|c| far[c * 4 + 1]).sum::<f64>(), 5.0);
        assert_eq!(obs.len(), 36 + 25);
    }

    #[test]
    fn sixteen_windows_cover_ten_by_ten() {
        let windows = covering_windows(10);
        assert_eq!(windows.len(), 16);
        for r in 0..10usize {
            for c in 0..10usize {
                assert!(windows
                    .iter()
                    .any(|&(wr, wc)| wr.abs_diff(r) <= 1 && wc.abs_diff(c) <= 1));
            }
        }
        // cells (3i, 3j) are pairwise ≥ 3 apart, so no window holds two: 16 is minimal
        let pins: Vec<(usize, usize)> = (0..4).flat_map(|i| (0..4).map(move |j| (3 * i, 3 * j))).collect();
        for (a, p) in pins.iter().enumerate() {
            for q in &pins[a + 1..] {
                assert!(p.0.abs_diff(q.0).max(p.1.abs_diff(q.1)) >= 3);
            }
        }
    }

    #[test]
    fn episode_length_bounded() {
        let mut pp = PredatorPrey::new(PredatorPreyConfig::small()).unwrap();
        pp.reset(&mut rng::seeded(2));
        for t in 0..20 {
            let r = pp.step(&[4, 4, 4]).unwrap();
            assert_eq!(r.done, t == 19);
        }
        assert!(pp.step(&[4, 4, 4]).is_err());
    }
}
