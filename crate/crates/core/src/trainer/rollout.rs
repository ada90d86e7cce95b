use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::PhaseRegime;
use crate::enforcer::{episode_penalty, BudgetConfig, EnforcerMode, EpisodeMasker, EpochCommStats};
use crate::env::{EnvConfig, EpisodeRecord};
use crate::error::{Error, Result};
use crate::policy::{
    gate_from_logits, AgentRecord, Estimator, MessageMode, PolicyParams, SampleMode, StepChoices, Stepper,
};
use crate::rng::{self, Rng, StreamKind};
use crate::tensor::{argmax, gumbel_noise, log_softmax, sample_categorical, softmax};

/// One episode with every per-agent record and its bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `records[t][slot]`.
    pub records: Vec<Vec<AgentRecord>>,
    pub success: bool,
    pub collisions: usize,
    pub env_reward: f64,
    /// Episode penalty times the outer λ, before any centering.
    pub penalty: f64,
    pub shaping: f64,
    pub alive_steps: usize,
    pub attempted: usize,
    pub delivered: usize,
    /// Delivered prototype indices (prototype mode only).
    pub proto_usage: Vec<usize>,
    /// Messages as received (for discreteness audits), only when requested.
    #[serde(skip)]
    pub messages: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn c_star(&self) -> f64 {
        frac(self.attempted, self.alive_steps)
    }

    pub fn c_hard(&self) -> f64 {
        frac(self.delivered, self.alive_steps)
    }
}

pub(crate) fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Everything a worker needs to play episodes.
#[derive(Clone, Copy, Debug)]
pub struct RolloutContext<'a> {
    pub params: &'a PolicyParams<f64>,
    pub env: &'a EnvConfig,
    pub regime: PhaseRegime,
    pub budget: &'a BudgetConfig,
    pub stats: &'a EpochCommStats,
    pub mode: SampleMode,
    pub record_messages: bool,
}

/// Play one complete episode.
pub fn run_episode(ctx: &RolloutContext<'_>, rng: &mut Rng) -> Result<Trajectory> {
    let p = ctx.params;
    let training = ctx.mode == SampleMode::Train;
    let mut env = ctx.env.build()?;
    let spec = env.spec();
    let n = spec.n_agents;
    let comm_on = p.config.communication;
    let mut masker = (ctx.regime.enforcer == EnforcerMode::Hard)
        .then(|| EpisodeMasker::new(ctx.budget, n, spec.max_steps, training, rng));
    let mut stepper = Stepper::new(p, n, false);
    let mut tally = EpisodeRecord::default();
    let mut traj = Trajectory::default();
    let mut state = env.reset(rng);
    let proto_mode = p.config.message_mode == MessageMode::Prototype;

    while !state.done {
        let thoughts = stepper.think(&state.obs, &state.alive, &state.spawned)?;
        if let Some(m) = masker.as_mut() {
            for i in 0..n {
                if state.alive[i] && state.spawned[i] {
                    m.respawn(i);
                }
            }
        }
        let mut recs: Vec<AgentRecord> = Vec::with_capacity(n);
        let mut attempts = vec![false; n];
        let mut actions = vec![0usize; n];
        for (i, th) in thoughts.iter().enumerate() {
            let mut rec = AgentRecord {
                alive: state.alive[i],
                spawned: state.spawned[i],
                obs: state.obs[i].clone(),
                ..AgentRecord::default()
            };
            if let Some(th) = th {
                let probs = softmax(&th.action_logits);
                rec.action = match ctx.mode {
                    SampleMode::Train => sample_categorical(&probs, rng),
                    SampleMode::Greedy => argmax(&th.action_logits),
                };
                rec.action_log_prob = log_softmax(&th.action_logits)[rec.action];
                rec.value = th.value;
                if comm_on {
                    if ctx.regime.gate_open {
                        rec.attempt = true;
                    } else {
                        let g = gate_from_logits(&th.gate_logits, rng, ctx.mode);
                        rec.gate_learned = true;
                        rec.attempt = g.attempt;
                        rec.gate_log_prob = g.log_prob;
                    }
                }
                if proto_mode {
                    let (index, noise) = match (ctx.mode, p.config.estimator) {
                        (SampleMode::Greedy, _) => (argmax(&th.proto_logits), Vec::new()),
                        (SampleMode::Train, Estimator::Reinforce) => {
                            (sample_categorical(&softmax(&th.proto_logits), rng), Vec::new())
                        }
                        (SampleMode::Train, _) => {
                            let noise = gumbel_noise(th.proto_logits.len(), rng);
                            let perturbed: Vec<f64> = th.proto_logits.iter().zip(&noise).map(|(l, g)| l + g).collect();
                            (argmax(&perturbed), noise)
                        }
                    };
                    rec.proto_index = index;
                    rec.proto_log_prob = log_softmax(&th.proto_logits)[index];
                    rec.noise = noise;
                }
                attempts[i] = rec.attempt;
                actions[i] = rec.action;
            }
            recs.push(rec);
        }
        let delivered = match masker.as_mut() {
            Some(m) => m.step(&attempts, &state.alive, rng),
            None => attempts.clone(),
        };
        let mut choices = Vec::with_capacity(n);
        for (i, rec) in recs.iter_mut().enumerate() {
            rec.delivered = delivered[i] && rec.alive;
            if rec.delivered && training && p.config.dropout > 0.0 {
                rec.dropped = rng.gen::<f64>() < p.config.dropout;
            }
            if rec.alive {
                traj.alive_steps += 1;
                traj.attempted += rec.attempt as usize;
                traj.delivered += rec.delivered as usize;
                if rec.delivered && proto_mode {
                    traj.proto_usage.push(rec.proto_index);
                }
            }
            choices.push(StepChoices {
                delivered: rec.delivered,
                proto_index: rec.proto_index,
                noise: rec.noise.clone(),
                dropped: rec.dropped,
            });
        }
        stepper.commit(&choices)?;
        if ctx.record_messages {
            let (msgs, flags) = stepper.last_messages();
            for (m, &f) in msgs.iter().zip(flags) {
                if f {
                    traj.messages.push(m.clone());
                }
            }
        }
        let next = env.step(&actions, rng)?;
        tally.absorb(&next);
        for (i, rec) in recs.iter_mut().enumerate() {
            if rec.alive {
                rec.env_reward = next.rewards[i];
                traj.env_reward += next.rewards[i];
            }
        }
        traj.records.push(recs);
        state = next;
    }

    traj.success = env.is_success(&tally);
    traj.collisions = tally.collisions;

    let penalty = episode_penalty(ctx.regime.enforcer, ctx.budget, ctx.stats, traj.c_star(), traj.c_hard())?;
    traj.penalty = ctx.budget.outer_lambda(ctx.regime.enforcer) * penalty;
    Ok(traj)
}

/// Write `−(penalty − baseline)` into every alive record of each episode.
/// With `center` the baseline is the batch's mean episode penalty, so the
/// shaping carries no constant per-step cost.
pub fn apply_shaping(trajs: &mut [Trajectory], center: bool) {
    let baseline = if center && !trajs.is_empty() {
        trajs.iter().map(|t| t.penalty).sum::<f64>() / trajs.len() as f64
    } else {
        0.0
    };
    for t in trajs {
        let shaping = -(t.penalty - baseline);
        t.shaping = 0.0;
        for rec in t.records.iter_mut().flatten() {
            rec.shaping = if rec.alive { shaping } else { 0.0 };
            t.shaping += rec.shaping;
        }
    }
}

/// Each worker plays complete episodes until it has stepped `quota` times.
/// Worker `w` draws from its own stream keyed by `(seed, epoch, w)`.
/// Shaping is applied to the whole batch.
pub fn collect_rollouts(
    ctx: &RolloutContext<'_>,
    workers: usize,
    quota: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Trajectory>> {
    if workers == 0 {
        return Err(Error::config("at least one worker is required"));
    }
    let per_worker: Vec<Result<Vec<Trajectory>>> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let mut r = rng::stream(seed, StreamKind::Rollout, ((epoch as u64) << 16) | w as u64);
            let mut out = Vec::new();
            let mut steps = 0;
            while steps < quota {
                let t = run_episode(ctx, &mut r)?;
                steps += t.steps().max(1);
                out.push(t);
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for w in per_worker {
        all.extend(w?);
    }
    apply_shaping(&mut all, ctx.budget.center_shaping);
    Ok(all)
}

/// Discounted returns per agent life, and advantages against the recorded
/// value estimates. `out[t][slot] = (advantage, return)`; zero for dead slots.
pub fn compute_returns(records: &[Vec<AgentRecord>], gamma: f64) -> Vec<Vec<(f64, f64)>> {
    let steps = records.len();
    let n = records.first().map_or(0, |r| r.len());
    let mut out = vec![vec![(0.0, 0.0); n]; steps];
    for i in 0..n {
        let mut g = 0.0;
        for t in (0..steps).rev() {
            let rec = &records[t][i];
            if !rec.alive {
                g = 0.0;
                continue;
            }
            let continues = records.get(t + 1).is_some_and(|nx| nx[i].alive && !nx[i].spawned);
            if !continues {
                g = 0.0;
            }
            g = rec.reward() + gamma * g;
            out[t][i] = (g - rec.value, g);
        }
    }
    out
}

/// Plain discounted returns of one reward sequence.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        g = r + gamma * g;
        out[t] = g;
    }
    out
}
