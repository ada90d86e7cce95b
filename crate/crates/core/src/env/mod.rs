//! Decentralized partially observable environments behind one episode
//! interface: blind traffic junction and cooperative predator-prey.

mod predator;
mod traffic;

pub use predator::{covering_windows, PredatorPrey, PredatorPreyConfig, PP_ACTIONS};
pub use traffic::{Difficulty, Route, TrafficJunction, TrafficJunctionConfig, BRAKE, GAS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Static description of a Dec-POMDP instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecPomdpSpec {
    pub n_agents: usize,
    pub action_sizes: Vec<usize>,
    pub obs_dim: usize,
    pub max_steps: usize,
    pub gamma: f64,
}

impl DecPomdpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::config("environment needs at least one agent"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("episode length must be at least 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "discount must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.action_sizes.len() != self.n_agents || self.action_sizes.contains(&0) {
            return Err(Error::config("every agent needs a non-empty action set"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Traffic junction: `(cell, t)` pairs holding two or more cars this step.
    pub collisions: usize,
    /// Predator-prey: predators on the prey cell after this step.
    pub on_prey: usize,
}

/// Outcome of `reset` or `step`.
///
/// `rewards[i]` rewards the action agent `i` just took (zero for agents
/// that did not act); `obs`, `alive` and `spawned` describe the next
/// decision point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub obs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub alive: Vec<bool>,
    /// Agent slot holds a newly arrived agent (fresh recurrent state).
    pub spawned: Vec<bool>,
    pub done: bool,
    pub info: StepInfo,
}

/// Running per-episode tallies used for success decisions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub steps: usize,
    pub collisions: usize,
    pub prey_reached: bool,
    pub complete: bool,
}

impl EpisodeRecord {
    pub fn absorb(&mut self, result: &StepResult) {
        self.steps += 1;
        self.collisions += result.info.collisions;
        self.prey_reached |= result.info.on_prey > 0;
        self.complete = result.done;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    TrafficJunction(TrafficJunctionConfig),
    PredatorPrey(PredatorPreyConfig),
}

impl EnvConfig {
    /// Named presets: `tj-easy`, `tj-medium`, `pp-5x5`, `pp-10x10`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "tj-easy" => EnvConfig::TrafficJunction(TrafficJunctionConfig::easy()),
            "tj-medium" => EnvConfig::TrafficJunction(TrafficJunctionConfig::medium()),
            "pp-5x5" => EnvConfig::PredatorPrey(PredatorPreyConfig::small()),
            "pp-10x10" => EnvConfig::PredatorPrey(PredatorPreyConfig::large()),
            other => {
                return Err(Error::config(format!(
                    "unknown environment `{other}` (expected tj-easy, tj-medium, pp-5x5, pp-10x10)"
                )))
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            EnvConfig::TrafficJunction(c) => match c.difficulty {
                Difficulty::Easy => "tj-easy".into(),
                Difficulty::Medium => "tj-medium".into(),
            },
            EnvConfig::PredatorPrey(c) => format!("pp-{}x{}", c.size, c.size),
        }
    }

    pub fn is_traffic(&self) -> bool {
        matches!(self, EnvConfig::TrafficJunction(_))
    }

    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvConfig::TrafficJunction(c) => Env::Traffic(TrafficJunction::new(c.clone())?),
            EnvConfig::PredatorPrey(c) => Env::Predator(PredatorPrey::new(c.clone())?),
        })
    }

    pub fn spec(&self) -> Result<DecPomdpSpec> {
        Ok(self.build()?.spec())
    }

    pub fn max_steps(&self) -> usize {
        match self {
            EnvConfig::TrafficJunction(c) => c.max_steps,
            EnvConfig::PredatorPrey(c) => c.max_steps,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            EnvConfig::TrafficJunction(c) => c.gamma,
            EnvConfig::PredatorPrey(c) => c.gamma,
        }
    }
}

/// Environment instance. A plain state machine; one per rollout worker.
#[derive(Clone, Debug)]
pub enum Env {
    Traffic(TrafficJunction),
    Predator(PredatorPrey),
}

impl Env {
    pub fn spec(&self) -> DecPomdpSpec {
        match self {
            Env::Traffic(e) => e.spec(),
            Env::Predator(e) => e.spec(),
        }
    }

    pub fn reset(&mut self, rng: &mut Rng) -> StepResult {
        match self {
            Env::Traffic(e) => e.reset(rng),
            Env::Predator(e) => e.reset(rng),
        }
    }

    pub fn step(&mut self, actions: &[usize], rng: &mut Rng) -> Result<StepResult> {
        match self {
            Env::Traffic(e) => e.step(actions, rng),
            Env::Predator(e) => e.step(actions),
        }
    }

    /// Observation of one agent; a dead agent observes the zero vector.
    pub fn observe(&self, agent: usize) -> Vec<f64> {
        match self {
            Env::Traffic(e) => e.observe(agent),
            Env::Predator(e) => e.observe(agent),
        }
    }

    pub fn is_success(&self, record: &EpisodeRecord) -> bool {
        match self {
            Env::Traffic(_) => traffic_success(record),
            Env::Predator(_) => predator_success(record),
        }
    }

    /// JSON snapshot of the hidden state, for episode traces.
    pub fn snapshot(&self) -> serde_json::Value {
        match self {
            Env::Traffic(e) => e.snapshot(),
            Env::Predator(e) => e.snapshot(),
        }
    }
}

/// Traffic junction: an episode succeeds iff it had no collision.
pub fn traffic_success(record: &EpisodeRecord) -> bool {
    record.collisions == 0
}

/// Predator-prey: an episode succeeds iff some predator reached the prey.
pub fn predator_success(record: &EpisodeRecord) -> bool {
    record.prey_reached
}

/// Writes one JSON object per step: `{t, actions, rewards, info, state}`.
pub fn write_trace_line<W: std::io::Write>(
    out: &mut W,
    t: usize,
    actions: &[usize],
    result: &StepResult,
    env: &Env,
) -> Result<()> {
    let line = serde_json::json!({
        "t": t,
        "actions": actions,
        "rewards": result.rewards,
        "alive": result.alive,
        "info": result.info,
        "done": result.done,
        "state": env.snapshot(),
    });
    serde_json::to_writer(&mut *out, &line)?;
    out.write_all(b"\n")?;
    Ok(())
}
