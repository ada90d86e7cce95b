//! Batched rollouts, REINFORCE with a learned baseline, and the epoch loop.

mod rollout;

pub use rollout::{
    apply_shaping, collect_rollouts, compute_returns, discounted_returns, run_episode, RolloutContext, Trajectory,
};

use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, RunMode};
use crate::curriculum::{Curriculum, CurriculumPhase, EpochSummary, PhaseRegime};
use crate::enforcer::{EnforcerMode, EpochCommStats};
use crate::error::{Error, Result};
use crate::metrics::{append_line, EpochMetrics};
use crate::policy::{episode_forward_backward, LossCoefficients, PolicyParams, SampleMode};
use crate::rng::{self, StreamKind};
use crate::tensor::{clip_grad_norm, Parameterized, RmsProp};
use rollout::frac;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub workers: usize,
    /// Environment steps per worker per epoch.
    pub batch_steps: usize,
    pub mini_updates: usize,
    pub epochs: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub grad_clip: f64,
    /// Checkpoint every this many epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    /// Stop as soon as the curriculum reaches Done.
    pub stop_when_done: bool,
    /// Stop once the curriculum enters this phase or a later one.
    pub stop_at_phase: Option<CurriculumPhase>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            workers: 16,
            batch_steps: 500,
            mini_updates: 10,
            epochs: 2000,
            lr: 0.001,
            value_coef: 0.5,
            entropy_coef: 0.01,
            grad_clip: 0.5,
            checkpoint_every: 50,
            stop_when_done: true,
            stop_at_phase: None,
        }
    }
}

impl TrainConfig {
    /// Two workers of 250 steps with four mini-updates.
    pub fn desk() -> Self {
        Self {
            workers: 2,
            batch_steps: 250,
            mini_updates: 4,
            epochs: 600,
            ..Self::default()
        }
    }

    pub fn validate(&self, episode_len: usize) -> Result<()> {
        if self.workers == 0 || self.mini_updates == 0 {
            return Err(Error::config("workers and mini_updates must be at least 1"));
        }
        if self.batch_steps < episode_len {
            return Err(Error::config(format!(
                "batch_steps {} is shorter than one episode ({episode_len})",
                self.batch_steps
            )));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("lr and grad_clip must be positive"));
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return Err(Error::config("loss coefficients must be nonnegative"));
        }
        Ok(())
    }
}

/// Loss and gradient statistics of one epoch's updates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Mean pre-clip gradient norm over mini-updates.
    pub grad_norm: f64,
}

/// Gradients of one episode's loss, flattened in parameter order.
fn episode_grads(
    params: &PolicyParams<f64>,
    traj: &Trajectory,
    gamma: f64,
    coef: LossCoefficients<f64>,
) -> Result<(Vec<Vec<f64>>, crate::policy::LossTerms<f64>)> {
    let mut local = params.clone();
    local.zero_grad();
    let targets = compute_returns(&traj.records, gamma);
    let out = episode_forward_backward(&mut local, &traj.records, &targets, coef, true)?;
    let grads = local
        .params()
        .iter()
        .map(|t| t.grad().map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    Ok((grads, out.loss))
}

/// Split the episodes into `cfg.mini_updates` consecutive groups and take
/// one clipped RMSProp step per group. Per-episode gradients are computed
/// in parallel and summed in episode order.
pub fn reinforce_update(
    trajs: &[Trajectory],
    params: &mut PolicyParams<f64>,
    opt: &mut RmsProp<f64>,
    cfg: &TrainConfig,
    gamma: f64,
) -> Result<UpdateStats> {
    let mut stats = UpdateStats::default();
    if trajs.is_empty() {
        return Ok(stats);
    }
    let groups = cfg.mini_updates.min(trajs.len());
    let per = trajs.len().div_ceil(groups);
    let mut n_updates = 0;
    for chunk in trajs.chunks(per) {
        let alive: usize = chunk.iter().map(|t| t.alive_steps).sum();
        if alive == 0 {
            continue;
        }
        let coef = LossCoefficients {
            value_coef: cfg.value_coef,
            entropy_coef: cfg.entropy_coef,
            scale: 1.0 / alive as f64,
        };
        let snapshot = &*params;
        let results: Vec<Result<_>> = chunk
            .par_iter()
            .map(|t| episode_grads(snapshot, t, gamma, coef))
            .collect();
        params.zero_grad();
        for r in results {
            let (grads, loss) = r?;
            for (p, g) in params.params_mut().into_iter().zip(grads) {
                if let Some(dst) = p.grad_mut() {
                    for (a, b) in dst.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            stats.loss += loss.total;
            stats.policy += loss.policy;
            stats.value += loss.value;
            stats.entropy += loss.entropy;
        }
        let mut ps = params.params_mut();
        let norm = clip_grad_norm(&mut ps, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::divergence("", "non-finite gradient norm"));
        }
        stats.grad_norm += norm;
        opt.step(&mut ps)?;
        n_updates += 1;
    }
    if n_updates > 0 {
        stats.grad_norm /= n_updates as f64;
    }
    Ok(stats)
}

/// Aggregate counts of a batch of episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub mean_shaping: f64,
    pub alive_steps: usize,
    pub attempted: usize,
    pub delivered: usize,
    pub c: f64,
    pub c_star: f64,
    pub c_hard: f64,
    pub collisions: usize,
}

pub fn summarize(trajs: &[Trajectory]) -> BatchSummary {
    let n = trajs.len();
    let mut s = BatchSummary {
        episodes: n,
        ..Default::default()
    };
    if n == 0 {
        return s;
    }
    for t in trajs {
        s.success_rate += t.success as usize as f64;
        s.mean_reward += t.env_reward;
        s.mean_shaping += t.shaping;
        s.alive_steps += t.alive_steps;
        s.attempted += t.attempted;
        s.delivered += t.delivered;
        s.collisions += t.collisions;
    }
    s.success_rate /= n as f64;
    s.mean_reward /= n as f64;
    s.mean_shaping /= n as f64;
    s.c = frac(s.delivered, s.alive_steps);
    s.c_star = frac(s.attempted, s.alive_steps);
    s.c_hard = s.c;
    s
}

/// Gate and shaping wiring for a run mode at a curriculum position.
pub fn regime_for(mode: RunMode, curriculum: &Curriculum) -> PhaseRegime {
    match mode {
        RunMode::FixedCts | RunMode::FixedProto => PhaseRegime {
            gate_open: true,
            enforcer: EnforcerMode::None,
        },
        RunMode::GatedCts | RunMode::GatedProto => PhaseRegime {
            gate_open: false,
            enforcer: EnforcerMode::None,
        },
        RunMode::Enforcer => curriculum.regime(),
    }
}

/// Phase label written to the metrics log.
pub fn phase_label(mode: RunMode, curriculum: &Curriculum) -> String {
    match mode {
        RunMode::FixedCts | RunMode::FixedProto => "OpenGate".into(),
        RunMode::GatedCts | RunMode::GatedProto => "LearnedGate".into(),
        RunMode::Enforcer => curriculum.phase.name().into(),
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
    pub fn phase_checkpoint(&self, epoch: usize, phase: CurriculumPhase) -> PathBuf {
        self.dir.join(format!("checkpoint-{epoch:05}-{}.json", phase.name()))
    }
}

/// Final state of a training run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Train one seed. With `out` set, writes the config snapshot, metrics
/// JSONL and checkpoints there; `resume` continues from a checkpoint.
pub fn run_training(
    cfg: &ExperimentConfig,
    seed: u64,
    out: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let spec = cfg.env.spec()?;
    let n_actions = spec.action_sizes[0];
    let (mut params, mut opt, mut curriculum, mut stats, start_epoch) = match resume {
        Some(ck) => {
            if ck.config.env != cfg.env || ck.config.effective_policy() != cfg.effective_policy() {
                return Err(Error::Checkpoint(
                    "checkpoint does not match the configured env/policy".into(),
                ));
            }
            let p = ck.params()?;
            (p, ck.optimizer, ck.curriculum, ck.stats, ck.epoch)
        }
        None => {
            let mut r = rng::stream(seed, StreamKind::Init, 0);
            let p = PolicyParams::<f64>::new(cfg.effective_policy(), spec.obs_dim, n_actions, &mut r)?;
            (
                p,
                RmsProp::new(cfg.train.lr),
                Curriculum::default(),
                EpochCommStats::default(),
                0,
            )
        }
    };

    let paths = out.map(RunPaths::new);
    let mut writer = match &paths {
        Some(p) => {
            std::fs::create_dir_all(&p.dir)?;
            std::fs::write(p.config(), cfg.to_json())?;
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(start_epoch > 0)
                .write(true)
                .truncate(start_epoch == 0)
                .open(p.metrics())?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let save = |epoch: usize,
                params: &PolicyParams<f64>,
                opt: &RmsProp<f64>,
                cur: &Curriculum,
                st: &EpochCommStats|
     -> Result<Checkpoint> {
        let ck = Checkpoint::capture(cfg, seed, epoch, params, opt, cur, st);
        if let Some(p) = &paths {
            ck.save(&p.checkpoint())?;
        }
        Ok(ck)
    };
    if start_epoch == 0 {
        save(0, &params, &opt, &curriculum, &stats)?;
    }

    let gamma = cfg.env.gamma();
    let mut metrics = Vec::new();
    let mut last = None;
    for epoch in start_epoch..cfg.train.epochs {
        let stop_done = cfg.train.stop_when_done && curriculum.phase == CurriculumPhase::Done;
        let stop_phase = cfg.train.stop_at_phase.is_some_and(|p| curriculum.phase >= p);
        if cfg.mode == RunMode::Enforcer && (stop_done || stop_phase) {
            break;
        }
        let clock = Instant::now();
        let regime = regime_for(cfg.mode, &curriculum);
        let label = phase_label(cfg.mode, &curriculum);
        let ctx = RolloutContext {
            params: &params,
            env: &cfg.env,
            regime,
            budget: &cfg.budget,
            stats: &stats,
            mode: SampleMode::Train,
            record_messages: false,
        };
        let context = |e: Error| e.with_context(&format!("phase {label}, epoch {epoch}"));
        let trajs = collect_rollouts(&ctx, cfg.train.workers, cfg.train.batch_steps, seed, epoch).map_err(context)?;
        let batch = summarize(&trajs);
        let upd = reinforce_update(&trajs, &mut params, &mut opt, &cfg.train, gamma).map_err(context)?;

        if regime.enforcer == EnforcerMode::Soft {
            stats.close_epoch(batch.c, batch.c_star, batch.c_hard, &cfg.budget)?;
        } else {
            stats.c = batch.c;
            stats.c_star = batch.c_star;
            stats.c_hard = batch.c_hard;
        }
        let r_p = if cfg.budget.b < 1.0 {
            crate::enforcer::soft_p_term(cfg.budget.b, batch.c, cfg.budget.proportional_sign)?
        } else {
            0.0
        };
        let m = EpochMetrics {
            epoch,
            phase: label,
            env: cfg.env.name(),
            mode: cfg.mode.label().into(),
            enforcer: cfg.enforcer_name().into(),
            budget: cfg.budget.b,
            seed,
            success_rate: batch.success_rate,
            mean_reward: batch.mean_reward,
            mean_shaping: batch.mean_shaping,
            c: batch.c,
            c_star: batch.c_star,
            c_hard: batch.c_hard,
            r_p,
            r_d: stats.rd,
            r_i: stats.ri,
            lr: opt.lr,
            episodes: batch.episodes,
            alive_steps: batch.alive_steps,
            delivered: batch.delivered,
            attempted: batch.attempted,
            loss: upd.loss,
            grad_norm: upd.grad_norm,
            wall_ms: clock.elapsed().as_millis() as u64,
        };
        if let Some(w) = writer.as_mut() {
            append_line(w, &m)?;
        }
        log::info!(
            "epoch {epoch} {} success {:.3} c {:.3} reward {:.3}",
            m.phase,
            m.success_rate,
            m.c,
            m.mean_reward
        );
        metrics.push(m);

        let mut transitioned = None;
        if cfg.mode == RunMode::Enforcer {
            let summary = EpochSummary {
                success_rate: batch.success_rate,
                mean_reward: batch.mean_reward,
                c: batch.c,
                c_hard: batch.c_hard,
            };
            let mut lr = opt.lr;
            transitioned = curriculum.observe(epoch, summary, &cfg.curriculum, &cfg.budget, &mut lr);
            opt.lr = lr;
        }
        let done = epoch + 1;
        let periodic = cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0;
        if periodic || transitioned.is_some() || done == cfg.train.epochs {
            let ck = save(done, &params, &opt, &curriculum, &stats)?;
            if let (Some(phase), Some(p)) = (transitioned, &paths) {
                ck.save(&p.phase_checkpoint(done, phase))?;
            }
            last = Some(ck);
        } else {
            last = None;
        }
    }
    let checkpoint = match last {
        Some(ck) => ck,
        None => save(
            metrics.last().map_or(start_epoch, |m| m.epoch + 1),
            &params,
            &opt,
            &curriculum,
            &stats,
        )?,
    };
    Ok(RunOutcome { checkpoint, metrics })
}

/// A checkpoint taken as the curriculum left MaxCommReward, re-pointed at
/// `cfg`'s budget and enforcer. Everything before that point does not
/// depend on either, so one warm-up can seed several enforcer runs.
pub fn fork_checkpoint(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if ck.config.env != cfg.env || ck.config.effective_policy() != cfg.effective_policy() {
        return Err(Error::Checkpoint(
            "checkpoint does not match the configured env/policy".into(),
        ));
    }
    let mut out = ck.clone();
    out.curriculum.retarget(cfg.budget.mode)?;
    out.config = cfg.clone();
    Ok(out)
}

/// Greedy evaluation of a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub c: f64,
    pub c_star: f64,
    pub c_hard: f64,
    pub collisions: usize,
    /// Count of delivered messages per prototype index.
    pub proto_usage: Vec<usize>,
    /// Delivered messages that are not bitwise prototype rows.
    pub off_bank_messages: usize,
}

/// Evaluate with every head greedy and no dropout or random masking, in the
/// regime of the checkpoint's final phase.
pub fn evaluate(ck: &Checkpoint, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Evaluation("no episodes requested".into()));
    }
    let params = ck.params()?;
    let spec = ck.config.env.spec()?;
    if spec.obs_dim != ck.obs_dim || spec.action_sizes[0] != ck.n_actions {
        return Err(Error::Evaluation("checkpoint does not match the environment".into()));
    }
    let regime = regime_for(ck.config.mode, &ck.curriculum);
    let ctx = RolloutContext {
        params: &params,
        env: &ck.config.env,
        regime,
        budget: &ck.config.budget,
        stats: &ck.stats,
        mode: SampleMode::Greedy,
        record_messages: true,
    };
    let mut r = rng::stream(seed, StreamKind::Eval, 0);
    let mut trajs = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        trajs.push(run_episode(&ctx, &mut r)?);
    }
    let s = summarize(&trajs);
    let mut usage = vec![0usize; params.config.n_protos];
    let proto = params.config.message_mode == crate::policy::MessageMode::Prototype;
    let mut off_bank = 0;
    for t in &trajs {
        for &k in &t.proto_usage {
            usage[k] += 1;
        }
        if proto {
            off_bank += t.messages.iter().filter(|m| !params.bank.is_row(m)).count();
        }
    }
    Ok(EvalReport {
        episodes,
        success_rate: s.success_rate,
        mean_reward: s.mean_reward,
        c: s.c,
        c_star: s.c_star,
        c_hard: s.c_hard,
        collisions: s.collisions,
        proto_usage: if proto { usage } else { Vec::new() },
        off_bank_messages: off_bank,
    })
}

#[cfg(test)]
mod tests;
