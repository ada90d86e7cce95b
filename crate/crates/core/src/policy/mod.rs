//! Recurrent gated agent with prototype-quantized messages.
//!
//! Per agent and timestep: `h, c = LSTM([enc(obs) ⊕ incoming], h, c)`;
//! the gate head decides whether to broadcast, the message head produces
//! a pre-message that is snapped onto the prototype bank, and the action
//! and value heads read the same hidden state. All agents share one
//! parameter set. Messages produced at step `t` are aggregated into the
//! receivers' input at step `t + 1`.

mod episode;

pub use episode::{
    episode_forward_backward, AgentRecord, EpisodeOutcome, LossCoefficients, LossTerms, StepChoices, Stepper,
    ThinkOutput,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{
    argmax, gumbel_noise, gumbel_soft_backward, log_softmax, sample_categorical, softmax, Linear, Lstm, LstmCache,
    Parameterized, Tensor,
};

/// Gate logit index meaning "communicate".
pub const COMMUNICATE: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageMode {
    /// Raw message-head output is broadcast.
    Continuous,
    /// Message is snapped to a row of the prototype bank.
    Prototype,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Gumbel-softmax sample; gradients through the soft relaxation.
    StraightThrough,
    /// Categorical sample trained by its log-probability only.
    Reinforce,
    /// Forward pass uses the soft mixture itself. Exact gradients; used
    /// to verify the straight-through backward code.
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Train,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Message dimension d_p (also used by continuous messages).
    pub msg_dim: usize,
    /// Number of prototypes N_p.
    pub n_protos: usize,
    pub message_mode: MessageMode,
    pub estimator: Estimator,
    /// τ_q in `logit_k = −‖m − p_k‖² / τ_q`.
    pub proto_temperature: f64,
    pub gumbel_temperature: f64,
    /// Whole-message dropout probability while training.
    pub dropout: f64,
    /// `false` disables communication entirely (no-communication ablation).
    pub communication: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: 64,
            msg_dim: 32,
            n_protos: 28,
            message_mode: MessageMode::Prototype,
            estimator: Estimator::StraightThrough,
            proto_temperature: 1.0,
            gumbel_temperature: 1.0,
            dropout: 0.1,
            communication: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.msg_dim == 0 {
            return Err(Error::config("hidden size and message dimension must be positive"));
        }
        if self.message_mode == MessageMode::Prototype && self.n_protos < 2 {
            return Err(Error::config("prototype bank needs at least 2 prototypes"));
        }
        if !(self.proto_temperature > 0.0 && self.gumbel_temperature > 0.0) {
            return Err(Error::config("temperatures must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// `N_p × d_p` learnable codebook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct PrototypeBank<T> {
    pub protos: Tensor<T>,
    pub temperature: T,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn new(n: usize, dim: usize, temperature: T, rng: &mut Rng) -> Self {
        // unit-scale spread so distinct prototypes start distinguishable
        let data = (0..n * dim).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
        PrototypeBank {
            protos: Tensor::from_vec(&[n, dim], data).expect("shape matches").trainable(),
            temperature,
        }
    }

    pub fn len(&self) -> usize {
        self.protos.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.protos.cols()
    }

    pub fn row(&self, k: usize) -> &[T] {
        self.protos.row(k)
    }

    /// `−‖m − p_k‖² / τ_q` for every prototype.
    pub fn logits(&self, m: &[T]) -> Vec<T> {
        (0..self.len())
            .map(|k| {
                let d: T = self.row(k).iter().zip(m).map(|(&p, &x)| (x - p) * (x - p)).sum();
                -d / self.temperature
            })
            .collect()
    }

    pub fn nearest(&self, m: &[T]) -> usize {
        argmax(&self.logits(m))
    }

    pub fn is_row(&self, v: &[T]) -> bool {
        (0..self.len()).any(|k| self.row(k) == v)
    }
}

/// Shared parameters of the agent network.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<T> {
    pub config: PolicyConfig,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub encoder: Linear<T>,
    pub lstm: Lstm<T>,
    pub gate: Linear<T>,
    pub message: Linear<T>,
    pub bank: PrototypeBank<T>,
    pub action: Linear<T>,
    pub value: Linear<T>,
}

/// Parameter names in [`Parameterized`] order; used by checkpoints.
pub const PARAM_NAMES: [&str; 14] = [
    "encoder.weight",
    "encoder.bias",
    "lstm.w_ih",
    "lstm.w_hh",
    "lstm.bias",
    "gate.weight",
    "gate.bias",
    "message.weight",
    "message.bias",
    "bank.protos",
    "action.weight",
    "action.bias",
    "value.weight",
    "value.bias",
];

impl<T: Scalar> PolicyParams<T> {
    pub fn new(config: PolicyConfig, obs_dim: usize, n_actions: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let encoder = Linear::new(obs_dim, h, rng);
        let lstm = Lstm::new(h + config.msg_dim, h, rng);
        let gate = Linear::new(h, 2, rng);
        let message = Linear::new(h, config.msg_dim, rng);
        let bank = PrototypeBank::new(
            config.n_protos.max(2),
            config.msg_dim,
            T::of(config.proto_temperature),
            rng,
        );
        let action = Linear::new(h, n_actions, rng);
        let value = Linear::new(h, 1, rng);
        Ok(PolicyParams {
            config,
            obs_dim,
            n_actions,
            encoder,
            lstm,
            gate,
            message,
            bank,
            action,
            value,
        })
    }

    /// All-zero parameters of the same architecture (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(T::zero());
            p.zero_grad();
        }
        z
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn msg_dim(&self) -> usize {
        self.config.msg_dim
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        PARAM_NAMES.iter().copied().zip(self.params()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let mut lstm = Lstm::zeros(self.lstm.input(), self.lstm.hidden());
        lstm.w_ih = self.lstm.w_ih.cast();
        lstm.w_hh = self.lstm.w_hh.cast();
        lstm.bias = self.lstm.bias.cast();
        PolicyParams {
            config: self.config.clone(),
            obs_dim: self.obs_dim,
            n_actions: self.n_actions,
            encoder: lin(&self.encoder),
            lstm,
            gate: lin(&self.gate),
            message: lin(&self.message),
            bank: PrototypeBank {
                protos: self.bank.protos.cast(),
                temperature: U::of(self.bank.temperature.as_f64()),
            },
            action: lin(&self.action),
            value: lin(&self.value),
        }
    }
}

impl<T: Scalar> Parameterized<T> for PolicyParams<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::with_capacity(14);
        v.extend(self.encoder.params());
        v.extend(self.lstm.params());
        v.extend(self.gate.params());
        v.extend(self.message.params());
        v.push(&self.bank.protos);
        v.extend(self.action.params());
        v.extend(self.value.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::with_capacity(14);
        v.extend(self.encoder.params_mut());
        v.extend(self.lstm.params_mut());
        v.extend(self.gate.params_mut());
        v.extend(self.message.params_mut());
        v.push(&mut self.bank.protos);
        v.extend(self.action.params_mut());
        v.extend(self.value.params_mut());
        v
    }
}

/// Per-agent recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
    /// Last message this agent delivered (zero if none).
    pub last_message: Vec<T>,
    pub alive: bool,
}

impl<T: Scalar> AgentState<T> {
    pub fn zeroed(hidden: usize, msg_dim: usize) -> Self {
        AgentState {
            h: vec![T::zero(); hidden],
            c: vec![T::zero(); hidden],
            last_message: vec![T::zero(); msg_dim],
            alive: false,
        }
    }

    pub fn reset(&mut self) {
        self.h.iter_mut().for_each(|v| *v = T::zero());
        self.c.iter_mut().for_each(|v| *v = T::zero());
        self.last_message.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Cached activations of one [`encode_step`].
#[derive(Clone, Debug, Default)]
pub struct EncodeCache<T> {
    pub obs: Vec<T>,
    pub lstm: LstmCache<T>,
}

/// New recurrent state from `[enc(obs) ⊕ incoming]`. A dead agent's state
/// is returned unchanged.
pub fn encode_step<T: Scalar>(
    obs: &[T],
    incoming: &[T],
    state: &AgentState<T>,
    params: &PolicyParams<T>,
) -> Result<(AgentState<T>, EncodeCache<T>)> {
    if !state.alive {
        return Ok((state.clone(), EncodeCache::default()));
    }
    if obs.len() != params.obs_dim || incoming.len() != params.msg_dim() {
        return Err(Error::config(format!(
            "encode_step expects obs {} and message {}, got {} and {}",
            params.obs_dim,
            params.msg_dim(),
            obs.len(),
            incoming.len()
        )));
    }
    let mut x = params.encoder.forward(obs)?;
    x.extend_from_slice(incoming);
    let (h, c, lstm) = params.lstm.forward(&x, &state.h, &state.c)?;
    let next = AgentState {
        h,
        c,
        last_message: state.last_message.clone(),
        alive: true,
    };
    Ok((
        next,
        EncodeCache {
            obs: obs.to_vec(),
            lstm,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision<T> {
    pub attempt: bool,
    /// Set after enforcer masking; starts equal to `attempt`.
    pub delivered: bool,
    pub log_prob: T,
    pub probs: Vec<T>,
}

impl<T: Scalar> GateDecision<T> {
    pub fn forced(open: bool) -> Self {
        GateDecision {
            attempt: open,
            delivered: open,
            log_prob: T::zero(),
            probs: if open {
                vec![T::one(), T::zero()]
            } else {
                vec![T::zero(), T::one()]
            },
        }
    }
}

pub fn gate_probs<T: Scalar>(h: &[T], params: &PolicyParams<T>) -> Result<Vec<T>> {
    Ok(softmax(&params.gate.forward(h)?))
}

/// Sample (train) or argmax (greedy) the binary gate; index 0 = communicate.
pub fn gate_sample<T: Scalar>(
    h: &[T],
    params: &PolicyParams<T>,
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<GateDecision<T>> {
    let logits = params.gate.forward(h)?;
    Ok(gate_from_logits(&logits, rng, mode))
}

pub fn gate_from_logits<T: Scalar>(logits: &[T], rng: &mut Rng, mode: SampleMode) -> GateDecision<T> {
    let probs = softmax(logits);
    let logp = log_softmax(logits);
    let idx = match mode {
        SampleMode::Train => sample_categorical(&probs, rng),
        SampleMode::Greedy => argmax(logits),
    };
    let attempt = idx == COMMUNICATE;
    GateDecision {
        attempt,
        delivered: attempt,
        log_prob: logp[idx],
        probs,
    }
}

/// Result of snapping a pre-message onto the codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<T> {
    pub message: Vec<T>,
    pub index: usize,
    /// Pre-message `m` from the message head.
    pub pre: Vec<T>,
    pub logits: Vec<T>,
    /// Soft relaxation (Gumbel-softmax or plain softmax); empty for continuous messages.
    pub soft: Vec<T>,
    /// Gumbel noise used for `soft`; empty when not sampled that way.
    pub noise: Vec<T>,
}

/// `message = prototype[k]` where `k` is a Gumbel-softmax sample (train,
/// straight-through), a categorical sample (reinforce fallback) or the
/// nearest prototype (greedy). Continuous mode passes `m` through.
pub fn quantize_message<T: Scalar>(
    h: &[T],
    params: &PolicyParams<T>,
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<Quantized<T>> {
    let pre = params.message.forward(h)?;
    if params.config.message_mode == MessageMode::Continuous {
        return Ok(Quantized {
            message: pre.clone(),
            index: 0,
            pre,
            logits: Vec::new(),
            soft: Vec::new(),
            noise: Vec::new(),
        });
    }
    let logits = params.bank.logits(&pre);
    let (index, soft, noise) = match (mode, params.config.estimator) {
        (SampleMode::Greedy, _) => (argmax(&logits), softmax(&logits), Vec::new()),
        (SampleMode::Train, Estimator::Reinforce) => {
            let p = softmax(&logits);
            (sample_categorical(&p, rng), p, Vec::new())
        }
        (SampleMode::Train, _) => {
            let noise = gumbel_noise(logits.len(), rng);
            let (idx, soft) = gumbel_soft(&logits, &noise, T::of(params.config.gumbel_temperature));
            (idx, soft, noise)
        }
    };
    let message = if params.config.estimator == Estimator::Relaxed && mode == SampleMode::Train {
        mix(&params.bank, &soft)
    } else {
        params.bank.row(index).to_vec()
    };
    Ok(Quantized {
        message,
        index,
        pre,
        logits,
        soft,
        noise,
    })
}

pub(crate) fn gumbel_soft<T: Scalar>(logits: &[T], noise: &[T], temperature: T) -> (usize, Vec<T>) {
    let perturbed: Vec<T> = logits.iter().zip(noise).map(|(&l, &g)| (l + g) / temperature).collect();
    (argmax(&perturbed), softmax(&perturbed))
}

pub(crate) fn mix<T: Scalar>(bank: &PrototypeBank<T>, weights: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); bank.dim()];
    for (k, &w) in weights.iter().enumerate() {
        for (o, &p) in out.iter_mut().zip(bank.row(k)) {
            *o += w * p;
        }
    }
    out
}

/// Backward of the prototype quantizer. `weights` is the forward mixing
/// vector (one-hot for straight-through, soft for relaxed); `soft` is the
/// relaxation the gradient flows through. Returns `d pre`.
pub(crate) fn quantize_backward<T: Scalar>(
    bank: &mut PrototypeBank<T>,
    pre: &[T],
    weights: &[T],
    soft: &[T],
    d_message: &[T],
    gumbel_temperature: T,
) -> Vec<T> {
    let n = bank.len();
    let dim = bank.dim();
    let d_weights: Vec<T> = (0..n).map(|k| crate::tensor::dot(bank.row(k), d_message)).collect();
    let d_logits = gumbel_soft_backward(soft, &d_weights, gumbel_temperature);
    let mut d_pre = vec![T::zero(); dim];
    proto_logits_backward(bank, pre, &d_logits, &mut d_pre);
    if let Some(g) = bank.protos.grad_mut() {
        for k in 0..n {
            if weights[k] == T::zero() {
                continue;
            }
            for j in 0..dim {
                g[k * dim + j] += weights[k] * d_message[j];
            }
        }
    }
    d_pre
}

/// Backward of `logit_k = −‖m − p_k‖² / τ_q` into `m` and the bank.
pub(crate) fn proto_logits_backward<T: Scalar>(
    bank: &mut PrototypeBank<T>,
    pre: &[T],
    d_logits: &[T],
    d_pre: &mut [T],
) {
    let dim = bank.dim();
    let two_over_tau = T::of(2.0) / bank.temperature;
    let protos = bank.protos.data().to_vec();
    let grad = bank.protos.grad_mut();
    let mut grad = grad;
    for (k, &dl) in d_logits.iter().enumerate() {
        if dl == T::zero() {
            continue;
        }
        for j in 0..dim {
            let diff = pre[j] - protos[k * dim + j];
            d_pre[j] -= dl * two_over_tau * diff;
            if let Some(g) = grad.as_deref_mut() {
                g[k * dim + j] += dl * two_over_tau * diff;
            }
        }
    }
}

/// Mean of the delivered messages of alive agents other than `receiver`;
/// the zero vector when nobody delivered.
pub fn aggregate_incoming<T: Scalar>(messages: &[(&[T], bool, bool)], receiver: usize, dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); dim];
    let mut count = 0usize;
    for (j, (m, delivered, alive)) in messages.iter().enumerate() {
        if j == receiver || !*delivered || !*alive {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(m.iter()) {
            *o += v;
        }
        count += 1;
    }
    if count > 1 {
        let inv = T::one() / T::of(count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput<T> {
    pub action: usize,
    pub log_prob: T,
    pub value: T,
    pub probs: Vec<T>,
}

/// Categorical (train) or argmax (greedy) action plus the baseline value.
pub fn act_and_value<T: Scalar>(
    h: &[T],
    params: &PolicyParams<T>,
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<ActOutput<T>> {
    let logits = params.action.forward(h)?;
    let value = params.value.forward(h)?[0];
    let probs = softmax(&logits);
    let logp = log_softmax(&logits);
    let action = match mode {
        SampleMode::Train => sample_categorical(&probs, rng),
        SampleMode::Greedy => argmax(&logits),
    };
    Ok(ActOutput {
        action,
        log_prob: logp[action],
        value,
        probs,
    })
}

/// Zero the whole message with probability `rate` while training.
/// Returns the (possibly zeroed) message and whether it was dropped.
pub fn comm_dropout<T: Scalar>(message: &[T], rate: f64, rng: &mut Rng, training: bool) -> (Vec<T>, bool) {
    if training && rate > 0.0 && rng.gen::<f64>() < rate {
        (vec![T::zero(); message.len()], true)
    } else {
        (message.to_vec(), false)
    }
}

/// Entropy `−Σ p log p` and its gradient w.r.t. the logits.
pub(crate) fn entropy_and_grad<T: Scalar>(probs: &[T]) -> (T, Vec<T>) {
    let logp: Vec<T> = probs
        .iter()
        .map(|&p| if p > T::zero() { p.ln() } else { T::zero() })
        .collect();
    let h = -probs.iter().zip(&logp).map(|(&p, &l)| p * l).sum::<T>();
    // dH/dz_j = −p_j (log p_j + H)
    let grad = probs.iter().zip(&logp).map(|(&p, &l)| -p * (l + h)).collect();
    (h, grad)
}

/// d(log p_a)/d logits = onehot(a) − p.
pub(crate) fn log_prob_grad<T: Scalar>(probs: &[T], chosen: usize) -> Vec<T> {
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| if j == chosen { T::one() - p } else { -p })
        .collect()
}
