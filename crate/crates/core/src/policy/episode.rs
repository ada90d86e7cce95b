//! Joint multi-agent forward pass over an episode and its reverse-mode
//! gradient. Receivers' gradients flow back into the senders' message
//! heads and recurrent states, so the message content is learned
//! end-to-end.

use serde::{Deserialize, Serialize};

use super::{
    aggregate_incoming, encode_step, entropy_and_grad, gumbel_soft, log_prob_grad, mix, proto_logits_backward,
    quantize_backward, AgentState, EncodeCache, Estimator, MessageMode, PolicyParams,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax, softmax};

/// Everything recorded about one agent at one step of a rollout: the
/// inputs, every sampled discrete choice (so the pass can be replayed under
/// new parameters) and the rewards.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub alive: bool,
    /// First step of a newly arrived agent in this slot.
    pub spawned: bool,
    pub obs: Vec<f64>,
    pub action: usize,
    pub action_log_prob: f64,
    /// Gate was sampled from the learned head (its log-prob is trained).
    pub gate_learned: bool,
    pub attempt: bool,
    pub delivered: bool,
    pub gate_log_prob: f64,
    pub proto_index: usize,
    pub proto_log_prob: f64,
    pub noise: Vec<f64>,
    pub dropped: bool,
    pub value: f64,
    pub env_reward: f64,
    /// Signed reward-shaping amount (`−λ·penalty`).
    pub shaping: f64,
}

impl AgentRecord {
    pub fn reward(&self) -> f64 {
        self.env_reward + self.shaping
    }
}

/// Outputs of the network heads for one alive agent.
#[derive(Clone, Debug)]
pub struct ThinkOutput<T> {
    pub h: Vec<T>,
    pub gate_logits: Vec<T>,
    pub action_logits: Vec<T>,
    pub value: T,
    pub pre: Vec<T>,
    /// Prototype logits (empty for continuous messages).
    pub proto_logits: Vec<T>,
}

/// Discrete choices needed to emit this step's messages.
#[derive(Clone, Debug, Default)]
pub struct StepChoices<T> {
    pub delivered: bool,
    pub proto_index: usize,
    pub noise: Vec<T>,
    pub dropped: bool,
}

#[derive(Clone, Debug)]
struct Tape<T> {
    enc: EncodeCache<T>,
    think: ThinkOutput<T>,
    senders: Vec<usize>,
    /// Forward mixing weights over prototypes (one-hot or soft).
    weights: Vec<T>,
    soft: Vec<T>,
}

/// Steps all agents forward together, one timestep per `think`/`commit`.
pub struct Stepper<'a, T> {
    params: &'a PolicyParams<T>,
    states: Vec<AgentState<T>>,
    messages: Vec<Vec<T>>,
    delivered: Vec<bool>,
    sent_alive: Vec<bool>,
    keep_tape: bool,
    tape: Vec<Vec<Option<Tape<T>>>>,
    pending: Vec<Option<Tape<T>>>,
}

impl<'a, T: Scalar> Stepper<'a, T> {
    pub fn new(params: &'a PolicyParams<T>, n_agents: usize, keep_tape: bool) -> Self {
        let (h, d) = (params.hidden(), params.msg_dim());
        Stepper {
            params,
            states: (0..n_agents).map(|_| AgentState::zeroed(h, d)).collect(),
            messages: vec![vec![T::zero(); d]; n_agents],
            delivered: vec![false; n_agents],
            sent_alive: vec![false; n_agents],
            keep_tape,
            tape: Vec::new(),
            pending: Vec::new(),
        }
    }

    pub fn states(&self) -> &[AgentState<T>] {
        &self.states
    }

    /// Messages emitted at the last committed step with their delivery flags.
    pub fn last_messages(&self) -> (&[Vec<T>], &[bool]) {
        (&self.messages, &self.delivered)
    }

    /// Encode observations plus last step's messages and evaluate the heads.
    pub fn think(&mut self, obs: &[Vec<f64>], alive: &[bool], spawned: &[bool]) -> Result<Vec<Option<ThinkOutput<T>>>> {
        let n = self.states.len();
        if obs.len() != n || alive.len() != n || spawned.len() != n {
            return Err(Error::contract("one observation per agent slot required"));
        }
        let d = self.params.msg_dim();
        let incoming_src: Vec<(&[T], bool, bool)> = (0..n)
            .map(|j| (self.messages[j].as_slice(), self.delivered[j], self.sent_alive[j]))
            .collect();
        let mut outputs = Vec::with_capacity(n);
        let mut pending = Vec::with_capacity(n);
        let mut next_states = Vec::with_capacity(n);
        for i in 0..n {
            let mut state = self.states[i].clone();
            if spawned[i] || !alive[i] {
                state.reset();
            }
            state.alive = alive[i];
            if !alive[i] {
                outputs.push(None);
                pending.push(None);
                next_states.push(state);
                continue;
            }
            let incoming = aggregate_incoming(&incoming_src, i, d);
            let senders: Vec<usize> = (0..n)
                .filter(|&j| j != i && incoming_src[j].1 && incoming_src[j].2)
                .collect();
            let obs_t: Vec<T> = obs[i].iter().map(|&v| T::of(v)).collect();
            let (next, enc) = encode_step(&obs_t, &incoming, &state, self.params)?;
            let think = self.heads(&next.h)?;
            outputs.push(Some(think.clone()));
            pending.push(Some(Tape {
                enc,
                think,
                senders,
                weights: Vec::new(),
                soft: Vec::new(),
            }));
            next_states.push(next);
        }
        self.states = next_states;
        self.pending = pending;
        Ok(outputs)
    }

    fn heads(&self, h: &[T]) -> Result<ThinkOutput<T>> {
        let p = self.params;
        let pre = p.message.forward(h)?;
        let proto_logits = if p.config.message_mode == MessageMode::Prototype {
            p.bank.logits(&pre)
        } else {
            Vec::new()
        };
        Ok(ThinkOutput {
            h: h.to_vec(),
            gate_logits: p.gate.forward(h)?,
            action_logits: p.action.forward(h)?,
            value: p.value.forward(h)?[0],
            pre,
            proto_logits,
        })
    }

    /// Emit this step's messages. `choices[i]` is ignored for dead agents.
    pub fn commit(&mut self, choices: &[StepChoices<T>]) -> Result<()> {
        let n = self.states.len();
        if choices.len() != n {
            return Err(Error::contract("one choice per agent slot required"));
        }
        let p = self.params;
        let d = p.msg_dim();
        let tau_g = T::of(p.config.gumbel_temperature);
        let mut pending = std::mem::take(&mut self.pending);
        for i in 0..n {
            let Some(tape) = pending[i].as_mut() else {
                self.messages[i] = vec![T::zero(); d];
                self.delivered[i] = false;
                self.sent_alive[i] = false;
                continue;
            };
            let ch = &choices[i];
            let mut message = match p.config.message_mode {
                MessageMode::Continuous => tape.think.pre.clone(),
                MessageMode::Prototype => {
                    let k = ch.proto_index;
                    if k >= p.bank.len() {
                        return Err(Error::contract(format!("prototype index {k} out of range")));
                    }
                    let logits = &tape.think.proto_logits;
                    match p.config.estimator {
                        Estimator::Reinforce => {
                            tape.soft = softmax(logits);
                            tape.weights = one_hot(k, logits.len());
                            p.bank.row(k).to_vec()
                        }
                        Estimator::StraightThrough | Estimator::Relaxed if ch.noise.len() == logits.len() => {
                            let (_, soft) = gumbel_soft(logits, &ch.noise, tau_g);
                            tape.weights = if p.config.estimator == Estimator::Relaxed {
                                soft.clone()
                            } else {
                                one_hot(k, logits.len())
                            };
                            tape.soft = soft;
                            mix(&p.bank, &tape.weights)
                        }
                        // greedy emission: no noise, nearest prototype
                        _ => {
                            tape.soft = softmax(logits);
                            tape.weights = one_hot(k, logits.len());
                            p.bank.row(k).to_vec()
                        }
                    }
                }
            };
            if ch.dropped {
                message.iter_mut().for_each(|v| *v = T::zero());
            }
            if ch.delivered {
                self.states[i].last_message = message.clone();
            }
            self.messages[i] = message;
            self.delivered[i] = ch.delivered;
            self.sent_alive[i] = true;
        }
        if self.keep_tape {
            self.tape.push(pending);
        }
        Ok(())
    }

    fn into_tape(self) -> Vec<Vec<Option<Tape<T>>>> {
        self.tape
    }
}

fn one_hot<T: Scalar>(k: usize, n: usize) -> Vec<T> {
    let mut v = vec![T::zero(); n];
    v[k] = T::one();
    v
}

/// Weights of the REINFORCE loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients<T> {
    pub value_coef: T,
    pub entropy_coef: T,
    /// Multiplies every per-step term (typically 1 / alive agent-steps).
    pub scale: T,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    pub total: T,
    pub policy: T,
    pub value: T,
    pub entropy: T,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome<T> {
    pub loss: LossTerms<T>,
}

/// Replays a recorded episode under `model`'s parameters with every
/// discrete choice held fixed, evaluates
///
/// `L = scale · Σ_alive [ −A (log π(a) + log π(gate)* + log π(proto)†)
///       + v_coef (G − V)² − e_coef (H(π_a) + H(π_gate)*) ]`
///
/// (* learned gate only, † reinforce estimator and delivered only) and,
/// when `backward` is set, accumulates `∂L/∂θ` into `model`'s gradients.
/// `targets[t][i] = (advantage, return)`.
pub fn episode_forward_backward<T: Scalar>(
    model: &mut PolicyParams<T>,
    records: &[Vec<AgentRecord>],
    targets: &[Vec<(f64, f64)>],
    coef: LossCoefficients<T>,
    backward: bool,
) -> Result<EpisodeOutcome<T>> {
    let n = records.first().map(|r| r.len()).unwrap_or(0);
    let tape = {
        let mut stepper = Stepper::new(&*model, n, true);
        for step in records {
            let obs: Vec<Vec<f64>> = step.iter().map(|r| r.obs.clone()).collect();
            let alive: Vec<bool> = step.iter().map(|r| r.alive).collect();
            let spawned: Vec<bool> = step.iter().map(|r| r.spawned).collect();
            stepper.think(&obs, &alive, &spawned)?;
            let choices: Vec<StepChoices<T>> = step
                .iter()
                .map(|r| StepChoices {
                    delivered: r.delivered,
                    proto_index: r.proto_index,
                    noise: r.noise.iter().map(|&v| T::of(v)).collect(),
                    dropped: r.dropped,
                })
                .collect();
            stepper.commit(&choices)?;
        }
        stepper.into_tape()
    };

    let mut terms = LossTerms::default();
    let reinforce_proto =
        model.config.message_mode == MessageMode::Prototype && model.config.estimator == Estimator::Reinforce;
    // per-(t, i) loss gradients w.r.t. head outputs
    for (t, step) in records.iter().enumerate() {
        for (i, rec) in step.iter().enumerate() {
            let Some(tp) = &tape[t][i] else { continue };
            let (adv, ret) = targets[t][i];
            let (adv, ret) = (T::of(adv), T::of(ret));
            let lp_a = log_softmax(&tp.think.action_logits)[rec.action];
            let (h_a, _) = entropy_and_grad(&softmax(&tp.think.action_logits));
            let mut pg = -adv * lp_a;
            let mut ent = h_a;
            if rec.gate_learned {
                let gi = if rec.attempt {
                    super::COMMUNICATE
                } else {
                    1 - super::COMMUNICATE
                };
                pg -= adv * log_softmax(&tp.think.gate_logits)[gi];
                ent += entropy_and_grad(&softmax(&tp.think.gate_logits)).0;
            }
            if reinforce_proto && rec.delivered {
                pg -= adv * log_softmax(&tp.think.proto_logits)[rec.proto_index];
            }
            let verr = ret - tp.think.value;
            terms.policy += coef.scale * pg;
            terms.value += coef.scale * coef.value_coef * verr * verr;
            terms.entropy += coef.scale * ent;
            terms.steps += 1;
        }
    }
    terms.total = terms.policy + terms.value - coef.entropy_coef * terms.entropy;
    if !terms.total.is_finite() {
        return Err(Error::divergence("", "non-finite loss"));
    }
    if !backward {
        return Ok(EpisodeOutcome { loss: terms });
    }

    let h_dim = model.hidden();
    let d = model.msg_dim();
    let tau_g = T::of(model.config.gumbel_temperature);
    let zero_h = || vec![T::zero(); h_dim];
    let mut dh_next: Vec<Vec<T>> = vec![zero_h(); n];
    let mut dc_next: Vec<Vec<T>> = vec![zero_h(); n];
    // gradient w.r.t. messages emitted at the step being processed
    let mut d_msg: Vec<Vec<T>> = vec![vec![T::zero(); d]; n];
    for t in (0..records.len()).rev() {
        let mut d_msg_prev: Vec<Vec<T>> = vec![vec![T::zero(); d]; n];
        let mut dh_prev_all: Vec<Vec<T>> = vec![zero_h(); n];
        let mut dc_prev_all: Vec<Vec<T>> = vec![zero_h(); n];
        for i in 0..n {
            let rec = &records[t][i];
            let Some(tp) = &tape[t][i] else { continue };
            let (adv, ret) = targets[t][i];
            let (adv, ret) = (T::of(adv), T::of(ret));
            let s = coef.scale;
            let h = &tp.think.h;

            // state carried from t+1 only within the same agent life
            let carries = records
                .get(t + 1)
                .map(|next| next[i].alive && !next[i].spawned)
                .unwrap_or(false);
            let mut dh = if carries { dh_next[i].clone() } else { zero_h() };
            let dc = if carries { dc_next[i].clone() } else { zero_h() };

            // action head: −A log π(a) − e H
            let probs_a = softmax(&tp.think.action_logits);
            let (_, dent_a) = entropy_and_grad(&probs_a);
            let dlp_a = log_prob_grad(&probs_a, rec.action);
            let d_alog: Vec<T> = dlp_a
                .iter()
                .zip(&dent_a)
                .map(|(&g, &e)| s * (-adv * g - coef.entropy_coef * e))
                .collect();
            model.action.backward(h, &d_alog, Some(&mut dh));

            // value head
            let dv = -T::of(2.0) * s * coef.value_coef * (ret - tp.think.value);
            model.value.backward(h, &[dv], Some(&mut dh));

            if rec.gate_learned {
                let probs_g = softmax(&tp.think.gate_logits);
                let gi = if rec.attempt {
                    super::COMMUNICATE
                } else {
                    1 - super::COMMUNICATE
                };
                let (_, dent_g) = entropy_and_grad(&probs_g);
                let d_glog: Vec<T> = log_prob_grad(&probs_g, gi)
                    .iter()
                    .zip(&dent_g)
                    .map(|(&g, &e)| s * (-adv * g - coef.entropy_coef * e))
                    .collect();
                model.gate.backward(h, &d_glog, Some(&mut dh));
            }

            // message path: gradient from receivers at t+1
            let mut d_pre = vec![T::zero(); d];
            let mut touched = false;
            if rec.delivered && !rec.dropped && d_msg[i].iter().any(|v| *v != T::zero()) {
                touched = true;
                match model.config.message_mode {
                    MessageMode::Continuous => {
                        for (a, b) in d_pre.iter_mut().zip(&d_msg[i]) {
                            *a += *b;
                        }
                    }
                    MessageMode::Prototype => match model.config.estimator {
                        Estimator::Reinforce => {
                            if let Some(g) = model.bank.protos.grad_mut() {
                                let k = rec.proto_index;
                                for j in 0..d {
                                    g[k * d + j] += d_msg[i][j];
                                }
                            }
                        }
                        _ => {
                            let dp = quantize_backward(
                                &mut model.bank,
                                &tp.think.pre,
                                &tp.weights,
                                &tp.soft,
                                &d_msg[i],
                                tau_g,
                            );
                            for (a, b) in d_pre.iter_mut().zip(&dp) {
                                *a += *b;
                            }
                        }
                    },
                }
            }
            if reinforce_proto && rec.delivered {
                touched = true;
                let probs_k = softmax(&tp.think.proto_logits);
                let d_logits: Vec<T> = log_prob_grad(&probs_k, rec.proto_index)
                    .into_iter()
                    .map(|g| -s * adv * g)
                    .collect();
                proto_logits_backward(&mut model.bank, &tp.think.pre, &d_logits, &mut d_pre);
            }
            if touched {
                model.message.backward(h, &d_pre, Some(&mut dh));
            }

            let (dx, dh_prev, dc_prev) = model.lstm.backward(&tp.enc.lstm, &dh, &dc);
            let enc_dim = model.encoder.out_dim();
            model.encoder.backward(&tp.enc.obs, &dx[..enc_dim], None);
            let d_in = &dx[enc_dim..];
            if !tp.senders.is_empty() {
                let inv = T::one() / T::of(tp.senders.len() as f64);
                for &j in &tp.senders {
                    for (a, &b) in d_msg_prev[j].iter_mut().zip(d_in) {
                        *a += b * inv;
                    }
                }
            }
            dh_prev_all[i] = dh_prev;
            dc_prev_all[i] = dc_prev;
        }
        dh_next = dh_prev_all;
        dc_next = dc_prev_all;
        d_msg = d_msg_prev;
    }
    Ok(EpisodeOutcome { loss: terms })
}
