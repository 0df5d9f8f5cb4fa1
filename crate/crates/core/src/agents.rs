//! Beam-learning environment and the DDPG, TD3 and SAC learners.
//!
//! The environment's state is the current quantized phase vector. An
//! action is an absolute continuous phase vector, snapped to the phase set
//! before it reaches the hardware. The learner only ever sees a scalar,
//! possibly noisy, cluster-average gain turned into a ternary reward.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rand::seq::index;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamform::{self, quantize_phases, weights, Beam, Codebook, PhaseSet};
use crate::channel::ChannelSet;
use crate::cluster::{self, Assignment, ClusterModel};
use crate::error::{check_len, config, ForgeError, Result};
use crate::neural::{
    gaussian_with_noise, split_gaussian, AdamState, DenseNet, Head, ScalarAdam, TargetPair,
};
use crate::rng::{stream, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Ddpg,
    Td3,
    Sac,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Ddpg, AgentKind::Td3, AgentKind::Sac];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Ddpg => "ddpg",
            AgentKind::Td3 => "td3",
            AgentKind::Sac => "sac",
        }
    }

    fn twin_critics(self) -> bool {
        !matches!(self, AgentKind::Ddpg)
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AgentKind {
    type Err = ForgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpg" => Ok(AgentKind::Ddpg),
            "td3" => Ok(AgentKind::Td3),
            "sac" => Ok(AgentKind::Sac),
            other => config(format!("unknown agent kind '{other}' (expected ddpg, td3 or sac)")),
        }
    }
}

/// Ornstein-Uhlenbeck exploration schedule for DDPG and TD3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuParams {
    pub theta: f64,
    /// Initial scale, radians.
    pub sigma: f64,
    pub sigma_min: f64,
    /// Multiplicative decay of the scale per sample.
    pub decay: f64,
}

impl Default for OuParams {
    fn default() -> Self {
        Self { theta: 0.15, sigma: 0.5 * PI, sigma_min: 0.01 * PI, decay: 0.9995 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentHyper {
    pub kind: AgentKind,
    pub discount: f64,
    pub tau: f64,
    pub lr: f64,
    pub actor_weight_decay: f64,
    pub critic_weight_decay: f64,
    pub alpha_lr: f64,
    pub initial_alpha: f64,
    /// When false, SAC's temperature stays at `initial_alpha`.
    pub learn_alpha: bool,
    /// `None` means `−M`.
    pub target_entropy: Option<f64>,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub policy_delay: usize,
    pub target_noise_scale: f64,
    pub target_noise_clip: f64,
    /// Actor hidden width is `actor_width_per_antenna · M`.
    pub actor_width_per_antenna: usize,
    /// Critic hidden width is `critic_width_per_antenna · M`.
    pub critic_width_per_antenna: usize,
    pub encoding: InputEncoding,
    pub ou: OuParams,
}

impl Default for AgentHyper {
    fn default() -> Self {
        Self {
            kind: AgentKind::Sac,
            discount: 0.5,
            tau: 0.005,
            lr: 3e-3,
            actor_weight_decay: 1e-2,
            critic_weight_decay: 1e-3,
            alpha_lr: 3e-3,
            initial_alpha: 1.0,
            learn_alpha: true,
            target_entropy: None,
            batch: 1024,
            buffer_capacity: 8192,
            policy_delay: 2,
            target_noise_scale: 0.2,
            target_noise_clip: 0.5,
            actor_width_per_antenna: 16,
            critic_width_per_antenna: 32,
            encoding: InputEncoding::Periodic,
            ou: OuParams::default(),
        }
    }
}

impl AgentHyper {
    pub fn with_kind(kind: AgentKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return config(format!("discount must be in (0, 1), got {}", self.discount));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return config(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if self.policy_delay == 0 {
            return config("policy_delay must be at least 1");
        }
        if self.batch == 0 || self.buffer_capacity < self.batch {
            return config(format!(
                "batch ({}) must be positive and no larger than the buffer ({})",
                self.batch, self.buffer_capacity
            ));
        }
        if self.actor_width_per_antenna == 0 || self.critic_width_per_antenna == 0 {
            return config("hidden widths must be positive");
        }
        if !(self.initial_alpha >= 0.0) {
            return config("initial_alpha must be non-negative");
        }
        let ou = &self.ou;
        if !(ou.theta > 0.0 && ou.theta <= 1.0 && ou.sigma >= 0.0 && ou.sigma_min >= 0.0 && ou.decay > 0.0 && ou.decay <= 1.0) {
            return config("OU parameters out of range");
        }
        Ok(())
    }
}

/// `(reward, next threshold)` for a measured gain.
pub fn reward(gain: f64, prev_gain: f64, beta: f64) -> (i8, f64) {
    if gain > beta {
        (1, gain)
    } else if gain > prev_gain {
        (0, beta)
    } else {
        (-1, beta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub beam: Beam,
    pub reward: i8,
    pub g_noisy: f64,
    /// Noise-free cluster gain, for logging only.
    pub g_true: f64,
    pub beta: f64,
}

/// One agent's view of its user cluster.
#[derive(Debug, Clone)]
pub struct BeamEnv {
    channels: Vec<Vec<Complex64>>,
    phase_set: PhaseSet,
    state: Beam,
    state_phases: Vec<f64>,
    beta: f64,
    g_prev: f64,
    eta: f64,
    rng: Rng,
}

impl BeamEnv {
    /// The threshold and previous gain start at the (noisy) gain of `initial`.
    /// `index` selects the agent's own feedback-noise stream under `seed`.
    pub fn new(
        channels: Vec<Vec<Complex64>>,
        phase_set: PhaseSet,
        initial: Beam,
        eta: f64,
        seed: u64,
        index: u64,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(ForgeError::Degenerate("environment needs at least one user".into()));
        }
        if !(eta.is_finite() && eta >= 0.0) {
            return config(format!("feedback noise intensity must be non-negative, got {eta}"));
        }
        for h in &channels {
            check_len(initial.antennas(), h.len())?;
        }
        let state_phases = initial.phases(&phase_set);
        let mut env = Self {
            channels,
            phase_set,
            state: initial,
            state_phases,
            beta: 0.0,
            g_prev: 0.0,
            eta,
            rng: stream(seed, Stream::Feedback, index),
        };
        let (noisy, _) = env.measure(&env.state.clone());
        env.beta = noisy;
        env.g_prev = noisy;
        Ok(env)
    }

    pub fn antennas(&self) -> usize {
        self.state.antennas()
    }

    pub fn phase_set(&self) -> &PhaseSet {
        &self.phase_set
    }

    pub fn state(&self) -> &[f64] {
        &self.state_phases
    }

    pub fn beam(&self) -> &Beam {
        &self.state
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn prev_gain(&self) -> f64 {
        self.g_prev
    }

    pub fn channels(&self) -> &[Vec<Complex64>] {
        &self.channels
    }

    /// `(noisy feedback, true mean gain)` for a beam.
    fn measure(&mut self, beam: &Beam) -> (f64, f64) {
        let w = weights(beam, &self.phase_set);
        let mut true_sum = 0.0;
        let mut noisy_sum = 0.0;
        for h in &self.channels {
            let g = beamform::gain(&w, h).expect("lengths checked at construction");
            true_sum += g;
            noisy_sum += if self.eta > 0.0 {
                let d: f64 = StandardNormal.sample(&mut self.rng);
                g + self.eta * g * d
            } else {
                g
            };
        }
        let n = self.channels.len() as f64;
        ((noisy_sum / n).max(0.0), true_sum / n)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        check_len(self.antennas(), action.len())?;
        if action.iter().any(|a| !a.is_finite()) {
            return config("action contains non-finite phases");
        }
        let beam = quantize_phases(action, &self.phase_set);
        let (g_noisy, g_true) = self.measure(&beam);
        let (r, beta) = reward(g_noisy, self.g_prev, self.beta);
        self.beta = beta;
        self.g_prev = g_noisy;
        self.state_phases = beam.phases(&self.phase_set);
        self.state = beam.clone();
        Ok(StepOutcome { next_state: self.state_phases.clone(), beam, reward: r, g_noisy, g_true, beta })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Continuous action before quantization.
    pub action: Vec<f64>,
    pub reward: i8,
    pub next_state: Vec<f64>,
}

/// A sampled minibatch, one row per transition.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    dim: usize,
    capacity: usize,
    states: Array2<f64>,
    actions: Array2<f64>,
    rewards: Array1<f64>,
    next_states: Array2<f64>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            dim,
            capacity,
            states: Array2::zeros((capacity, dim)),
            actions: Array2::zeros((capacity, dim)),
            rewards: Array1::zeros(capacity),
            next_states: Array2::zeros((capacity, dim)),
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        (self.inserted as usize).min(self.capacity)
    }

    pub fn is_empty(&self) -> bool {
        self.inserted == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        for v in [&t.state, &t.action, &t.next_state] {
            check_len(self.dim, v.len())?;
        }
        let slot = (self.inserted % self.capacity as u64) as usize;
        self.states.row_mut(slot).assign(&ndarray::aview1(&t.state));
        self.actions.row_mut(slot).assign(&ndarray::aview1(&t.action));
        self.next_states.row_mut(slot).assign(&ndarray::aview1(&t.next_state));
        self.rewards[slot] = t.reward as f64;
        self.inserted += 1;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Transition {
        Transition {
            state: self.states.row(i).to_vec(),
            action: self.actions.row(i).to_vec(),
            reward: self.rewards[i] as i8,
            next_state: self.next_states.row(i).to_vec(),
        }
    }

    /// `n` distinct stored transitions, uniformly at random.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        if n > self.len() {
            return config(format!("cannot sample {n} transitions from {}", self.len()));
        }
        let idx = index::sample(rng, self.len(), n).into_vec();
        Ok(Batch {
            states: self.states.select(Axis(0), &idx),
            actions: self.actions.select(Axis(0), &idx),
            rewards: self.rewards.select(Axis(0), &idx),
            next_states: self.next_states.select(Axis(0), &idx),
        })
    }
}

/// Ornstein-Uhlenbeck process with a multiplicatively decaying scale.
#[derive(Debug, Clone, PartialEq)]
pub struct OuState {
    pub theta: f64,
    pub sigma: f64,
    pub sigma_min: f64,
    pub decay: f64,
    pub x: Vec<f64>,
}

impl OuState {
    pub fn new(params: &OuParams, dim: usize) -> Self {
        Self { theta: params.theta, sigma: params.sigma, sigma_min: params.sigma_min, decay: params.decay, x: vec![0.0; dim] }
    }

    /// Advances the process one step and returns the new sample.
    pub fn sample(&mut self, rng: &mut Rng) -> Vec<f64> {
        for x in &mut self.x {
            let n: f64 = StandardNormal.sample(rng);
            *x += -self.theta * *x + self.sigma * n;
        }
        self.sigma = (self.sigma * self.decay).max(self.sigma_min);
        self.x.clone()
    }
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("one row")
}

/// How phase vectors are presented to the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputEncoding {
    /// `φ/π`, one input per phase.
    Scaled,
    /// `[cos φ | sin φ]`, two inputs per phase.
    Periodic,
}

impl InputEncoding {
    fn width(self, m: usize) -> usize {
        match self {
            InputEncoding::Scaled => m,
            InputEncoding::Periodic => 2 * m,
        }
    }

    fn encode(self, phases: ArrayView2<f64>) -> Array2<f64> {
        match self {
            InputEncoding::Scaled => phases.mapv(|p| p / PI),
            InputEncoding::Periodic => {
                concatenate(Axis(1), &[phases.mapv(f64::cos).view(), phases.mapv(f64::sin).view()])
                    .expect("equal row counts")
            }
        }
    }

    /// `∂L/∂φ` from the gradient with respect to the encoded inputs.
    fn phase_grad(self, phases: ArrayView2<f64>, grad: ArrayView2<f64>) -> Array2<f64> {
        match self {
            InputEncoding::Scaled => grad.mapv(|g| g / PI),
            InputEncoding::Periodic => {
                let m = phases.ncols();
                let mut out = Array2::zeros(phases.raw_dim());
                ndarray::Zip::indexed(&mut out).and(phases).for_each(|(r, c), o, &p| {
                    *o = -p.sin() * grad[[r, c]] + p.cos() * grad[[r, m + c]];
                });
                out
            }
        }
    }

    fn critic_input(self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        concatenate(Axis(1), &[self.encode(states).view(), self.encode(actions).view()]).expect("equal row counts")
    }
}

/// Wraps a phase vector into `(−π, π]`.
fn wrap_all(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = beamform::wrap_phase(*x));
}

pub struct Critic {
    pub nets: TargetPair,
    pub opt: AdamState,
}

/// Actor, critic(s), optimizers and exploration state of one learner.
pub struct Agent {
    hyper: AgentHyper,
    antennas: usize,
    pub actor: TargetPair,
    pub actor_opt: AdamState,
    pub critics: Vec<Critic>,
    pub log_alpha: f64,
    alpha_opt: ScalarAdam,
    ou: Option<OuState>,
    updates: u64,
    rng: Rng,
}

impl Agent {
    /// `index` selects the agent's own RNG stream under `seed`.
    pub fn new(hyper: &AgentHyper, antennas: usize, seed: u64, index: u64) -> Result<Self> {
        hyper.validate()?;
        if antennas == 0 {
            return config("agent needs at least one antenna");
        }
        let mut rng = stream(seed, Stream::Agents, index);
        let m = antennas;
        let ah = hyper.actor_width_per_antenna * m;
        let ch = hyper.critic_width_per_antenna * m;
        let (head, out) = match hyper.kind {
            AgentKind::Sac => (Head::Gaussian, 2 * m),
            _ => (Head::Squash, m),
        };
        let enc = hyper.encoding;
        let actor_net = DenseNet::new(&[enc.width(m), ah, ah, out], head, 0.01, &mut rng)?;
        let actor_opt = AdamState::new(&actor_net, hyper.lr, hyper.actor_weight_decay);
        let n_critics = if hyper.kind.twin_critics() { 2 } else { 1 };
        let critics = (0..n_critics)
            .map(|_| {
                let net = DenseNet::new(&[2 * enc.width(m), ch, ch, 1], Head::Linear, 1.0, &mut rng)?;
                let opt = AdamState::new(&net, hyper.lr, hyper.critic_weight_decay);
                Ok(Critic { nets: TargetPair::new(net, hyper.tau), opt })
            })
            .collect::<Result<Vec<_>>>()?;
        let ou = (hyper.kind != AgentKind::Sac).then(|| OuState::new(&hyper.ou, m));
        Ok(Self {
            hyper: hyper.clone(),
            antennas,
            actor: TargetPair::new(actor_net, hyper.tau),
            actor_opt,
            critics,
            log_alpha: hyper.initial_alpha.ln(),
            alpha_opt: ScalarAdam::new(hyper.alpha_lr),
            ou,
            updates: 0,
            rng,
        })
    }

    pub fn hyper(&self) -> &AgentHyper {
        &self.hyper
    }

    pub fn kind(&self) -> AgentKind {
        self.hyper.kind
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    fn encoding(&self) -> InputEncoding {
        self.hyper.encoding
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn ou(&self) -> Option<&OuState> {
        self.ou.as_ref()
    }

    /// Current exploration scale: OU sigma, or the SAC temperature.
    pub fn exploration(&self) -> f64 {
        match &self.ou {
            Some(ou) => ou.sigma,
            None => self.alpha(),
        }
    }

    fn target_entropy(&self) -> f64 {
        self.hyper.target_entropy.unwrap_or(-(self.antennas as f64))
    }

    /// Noise-free policy output for a single state.
    pub fn deterministic_action(&self, state: &[f64]) -> Vec<f64> {
        let x = self.encoding().encode(row(state).view());
        let out = self.actor.online.predict(x.view());
        match self.hyper.kind {
            AgentKind::Sac => out.slice(s![0, ..self.antennas]).mapv(|z| PI * z.tanh()).to_vec(),
            _ => out.row(0).to_vec(),
        }
    }

    /// Quantized deterministic action at `state`.
    pub fn beam_at(&self, state: &[f64], phase_set: &PhaseSet) -> Beam {
        quantize_phases(&self.deterministic_action(state), phase_set)
    }

    /// Exploratory action: policy plus OU noise (wrapped into `(−π, π]`),
    /// or a draw from the squashed Gaussian policy.
    pub fn act(&mut self, state: &[f64]) -> Vec<f64> {
        match self.hyper.kind {
            AgentKind::Sac => {
                let x = self.encoding().encode(row(state).view());
                let out = self.actor.online.predict(x.view());
                let (mean, log_std) = split_gaussian(&out);
                let eps = Array2::from_shape_simple_fn(mean.raw_dim(), || StandardNormal.sample(&mut self.rng));
                gaussian_with_noise(mean, log_std, eps).action.row(0).to_vec()
            }
            _ => {
                let mut a = self.deterministic_action(state);
                let noise = self.ou.as_mut().expect("deterministic agents carry OU state").sample(&mut self.rng);
                a.iter_mut().zip(noise).for_each(|(a, n)| *a += n);
                wrap_all(&mut a);
                a
            }
        }
    }

    /// One gradient update of the agent's networks from a minibatch.
    pub fn update(&mut self, batch: &Batch) {
        match self.hyper.kind {
            AgentKind::Ddpg => self.ddpg_update(batch),
            AgentKind::Td3 => self.td3_update(batch),
            AgentKind::Sac => self.sac_update(batch),
        }
        self.updates += 1;
    }

    /// Regresses critic `i` toward `targets`; returns the mean squared error.
    fn fit_critic(&mut self, i: usize, input: &Array2<f64>, targets: &Array1<f64>) -> f64 {
        let critic = &mut self.critics[i];
        let (q, cache) = critic.nets.online.forward(input.view());
        let n = targets.len() as f64;
        let err = &q.column(0) - targets;
        let loss = err.mapv(|e| e * e).sum() / n;
        let up = err.mapv(|e| 2.0 * e / n).insert_axis(Axis(1));
        let (grads, _) = critic.nets.online.backward(&cache, up.view(), true);
        critic.opt.step(&mut critic.nets.online, &grads.expect("requested"));
        loss
    }

    fn target_q(&self, i: usize, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array1<f64> {
        self.critics[i].nets.target.predict(self.encoding().critic_input(states, actions).view()).column(0).to_owned()
    }

    /// Deterministic-policy gradient step through critic 0.
    fn deterministic_actor_step(&mut self, states: ArrayView2<f64>) {
        let n = states.nrows() as f64;
        let (actions, actor_cache) = self.actor.online.forward(self.encoding().encode(states).view());
        let input = self.encoding().critic_input(states, actions.view());
        let critic = &self.critics[0].nets.online;
        let (_, cache) = critic.forward(input.view());
        let up = Array2::from_elem((states.nrows(), 1), -1.0 / n);
        let (_, d_input) = critic.backward(&cache, up.view(), false);
        // critic sees a/π
        let enc = self.hyper.encoding;
        let d_action = enc.phase_grad(actions.view(), d_input.slice(s![.., enc.width(self.antennas)..]));
        let (grads, _) = self.actor.online.backward(&actor_cache, d_action.view(), true);
        self.actor_opt.step(&mut self.actor.online, &grads.expect("requested"));
    }

    pub fn ddpg_update(&mut self, b: &Batch) {
        let next_actions = self.actor.target.predict(self.encoding().encode(b.next_states.view()).view());
        let q_next = self.target_q(0, b.next_states.view(), next_actions.view());
        let targets = &b.rewards + &(q_next * self.hyper.discount);
        let input = self.encoding().critic_input(b.states.view(), b.actions.view());
        self.fit_critic(0, &input, &targets);
        self.deterministic_actor_step(b.states.view());
        self.actor.soft_update();
        self.critics[0].nets.soft_update();
    }

    /// Clipped double-Q target: `r + γ·min(Q1', Q2')` at smoothed target actions.
    pub fn td3_targets(&mut self, b: &Batch) -> Array1<f64> {
        let mut next_actions = self.actor.target.predict(self.encoding().encode(b.next_states.view()).view());
        if self.hyper.target_noise_scale > 0.0 {
            let normal = Normal::new(0.0, self.hyper.target_noise_scale).expect("positive scale");
            let clip = self.hyper.target_noise_clip;
            next_actions.mapv_inplace(|a| (a + normal.sample(&mut self.rng).clamp(-clip, clip)).clamp(-PI, PI));
        }
        let q1 = self.target_q(0, b.next_states.view(), next_actions.view());
        let q2 = self.target_q(1, b.next_states.view(), next_actions.view());
        let q_min = ndarray::Zip::from(&q1).and(&q2).map_collect(|a, b| a.min(*b));
        &b.rewards + &(q_min * self.hyper.discount)
    }

    pub fn td3_update(&mut self, b: &Batch) {
        let targets = self.td3_targets(b);
        let input = self.encoding().critic_input(b.states.view(), b.actions.view());
        self.fit_critic(0, &input, &targets);
        self.fit_critic(1, &input, &targets);
        if (self.updates + 1).is_multiple_of(self.hyper.policy_delay as u64) {
            self.deterministic_actor_step(b.states.view());
            self.actor.soft_update();
            self.critics.iter_mut().for_each(|c| c.nets.soft_update());
        }
    }

    pub fn sac_update(&mut self, b: &Batch) {
        let alpha = self.alpha();
        let rows = b.states.nrows();
        let n = rows as f64;

        // critic targets from fresh next-state actions
        let next_out = self.actor.online.predict(self.encoding().encode(b.next_states.view()).view());
        let (mean, log_std) = split_gaussian(&next_out);
        let eps = Array2::from_shape_simple_fn(mean.raw_dim(), || StandardNormal.sample(&mut self.rng));
        let next = gaussian_with_noise(mean, log_std, eps);
        let q1 = self.target_q(0, b.next_states.view(), next.action.view());
        let q2 = self.target_q(1, b.next_states.view(), next.action.view());
        let soft_v = ndarray::Zip::from(&q1).and(&q2).and(&next.log_prob).map_collect(|a, b, lp| a.min(*b) - alpha * lp);
        let targets = &b.rewards + &(soft_v * self.hyper.discount);
        let input = self.encoding().critic_input(b.states.view(), b.actions.view());
        self.fit_critic(0, &input, &targets);
        self.fit_critic(1, &input, &targets);

        // actor: minimize α·log π(a|s) − min Q(s, a), a reparameterized
        let m = self.antennas;
        let (out, actor_cache) = self.actor.online.forward(self.encoding().encode(b.states.view()).view());
        let (mean, log_std) = split_gaussian(&out);
        let eps = Array2::from_shape_simple_fn(mean.raw_dim(), || StandardNormal.sample(&mut self.rng));
        let draw = gaussian_with_noise(mean, log_std, eps);
        let input = self.encoding().critic_input(b.states.view(), draw.action.view());
        let (qa, cache_a) = self.critics[0].nets.online.forward(input.view());
        let (qb, cache_b) = self.critics[1].nets.online.forward(input.view());
        // route −1/n through whichever critic is smaller per sample
        let mut up_a = Array2::zeros((rows, 1));
        let mut up_b = Array2::zeros((rows, 1));
        for r in 0..rows {
            if qa[[r, 0]] <= qb[[r, 0]] {
                up_a[[r, 0]] = -1.0 / n;
            } else {
                up_b[[r, 0]] = -1.0 / n;
            }
        }
        let (_, da) = self.critics[0].nets.online.backward(&cache_a, up_a.view(), false);
        let (_, db) = self.critics[1].nets.online.backward(&cache_b, up_b.view(), false);
        let split = self.encoding().width(m);
        let d_enc = &da.slice(s![.., split..]) + &db.slice(s![.., split..]);
        let d_action = self.encoding().phase_grad(draw.action.view(), d_enc.view());
        let mut upstream = Array2::zeros((rows, 2 * m));
        for r in 0..rows {
            for c in 0..m {
                let z = draw.z[[r, c]];
                let t = z.tanh();
                // d(log π)/dz from the tanh correction is 2·tanh(z)
                let dz = alpha * 2.0 * t / n + d_action[[r, c]] * PI * (1.0 - t * t);
                upstream[[r, c]] = dz;
                upstream[[r, m + c]] = dz * draw.std[[r, c]] * draw.eps[[r, c]] - alpha / n;
            }
        }
        let (grads, _) = self.actor.online.backward(&actor_cache, upstream.view(), true);
        self.actor_opt.step(&mut self.actor.online, &grads.expect("requested"));

        if self.hyper.learn_alpha {
            let mean_lp = draw.log_prob.sum() / n;
            let grad = -(mean_lp + self.target_entropy());
            self.alpha_opt.step(&mut self.log_alpha, grad);
        }
        self.critics.iter_mut().for_each(|c| c.nets.soft_update());
    }

    /// All parameters finite (networks and temperature).
    pub fn is_finite(&self) -> bool {
        self.actor.online.is_finite()
            && self.critics.iter().all(|c| c.nets.online.is_finite() && c.nets.target.is_finite())
            && (self.log_alpha.is_finite() || self.hyper.initial_alpha == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub g_true: f64,
    pub g_noisy: f64,
    pub reward: i8,
    pub beta: f64,
    pub explore: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: [&'static str; 6] = ["iter", "g_true", "g_noisy", "reward", "beta", "explore"];

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.iter.to_string(),
                r.g_true.to_string(),
                r.g_noisy.to_string(),
                r.reward.to_string(),
                r.beta.to_string(),
                r.explore.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| -> Result<&str> {
                rec.get(k).ok_or(ForgeError::Parse { line: i + 2, message: "missing field".into() })
            };
            let num = |k: usize| -> Result<f64> {
                field(k)?.parse().map_err(|_| ForgeError::Parse { line: i + 2, message: format!("bad number in column {k}") })
            };
            rows.push(LogRow {
                iter: num(0)? as u64,
                g_true: num(1)?,
                g_noisy: num(2)?,
                reward: num(3)? as i8,
                beta: num(4)?,
                explore: num(5)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn final_explore(&self) -> Option<f64> {
        self.rows.last().map(|r| r.explore)
    }
}

#[derive(Debug, Clone)]
pub struct AgentRun {
    /// Beam that set the highest threshold during training.
    pub best_beam: Beam,
    pub best_beta: f64,
    pub initial_beam: Beam,
    pub final_alpha: f64,
    pub log: TrainLog,
}

/// Runs `iters` environment steps with one update per step once the
/// buffer holds a full batch.
pub fn train(agent: &mut Agent, env: &mut BeamEnv, iters: u64) -> Result<AgentRun> {
    check_len(agent.antennas(), env.antennas())?;
    let hyper = agent.hyper().clone();
    let mut buffer = ReplayBuffer::new(hyper.buffer_capacity, agent.antennas());
    let initial_beam = env.beam().clone();
    let mut best = (initial_beam.clone(), env.beta());
    let mut log = TrainLog { rows: Vec::with_capacity(iters as usize) };
    for iter in 0..iters {
        let explore = agent.exploration();
        let state = env.state().to_vec();
        let action = agent.act(&state);
        let out = env.step(&action)?;
        buffer.push(&Transition { state, action, reward: out.reward, next_state: out.next_state })?;
        if out.reward == 1 {
            best = (out.beam.clone(), out.beta);
        }
        if buffer.len() >= hyper.batch {
            let batch = buffer.sample(hyper.batch, &mut agent.rng)?;
            agent.update(&batch);
        }
        log.rows.push(LogRow {
            iter,
            g_true: out.g_true,
            g_noisy: out.g_noisy,
            reward: out.reward,
            beta: out.beta,
            explore,
        });
    }
    Ok(AgentRun { best_beam: best.0, best_beta: best.1, initial_beam, final_alpha: agent.alpha(), log })
}

/// Trains a fresh agent on `channels` starting from its own initial beam.
pub fn train_agent(
    channels: Vec<Vec<Complex64>>,
    phase_set: PhaseSet,
    eta: f64,
    hyper: &AgentHyper,
    iters: u64,
    seed: u64,
) -> Result<AgentRun> {
    let antennas = channels.first().map_or(0, Vec::len);
    let agent = Agent::new(hyper, antennas, seed, 0)?;
    let initial = agent.beam_at(&vec![0.0; antennas], &phase_set);
    let env = BeamEnv::new(channels, phase_set, initial, eta, seed, 0)?;
    train_with(agent, env, iters)
}

fn train_with(mut agent: Agent, mut env: BeamEnv, iters: u64) -> Result<AgentRun> {
    train(&mut agent, &mut env, iters)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiConfig {
    pub beams: usize,
    pub sensing_beams: usize,
    pub bits: u32,
    pub eta: f64,
    pub iters: u64,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
    pub hyper: AgentHyper,
}

impl Default for MultiConfig {
    fn default() -> Self {
        Self {
            beams: 8,
            sensing_beams: 32,
            bits: 4,
            eta: 0.0,
            iters: 10_000,
            kmeans_iters: 300,
            kmeans_tol: 1e-9,
            seed: 0,
            hyper: AgentHyper::default(),
        }
    }
}

/// Everything decided before training starts: clusters, the agents'
/// initial beams and the cluster each agent serves.
pub struct MultiPlan {
    pub phase_set: PhaseSet,
    pub clusters: ClusterModel,
    /// User index (into the channel set) of every clustered point.
    pub clustered_users: Vec<usize>,
    pub degenerate_users: Vec<usize>,
    pub initial_beams: Vec<Beam>,
    /// `cost[n][c]`: mean gain of agent `n`'s initial beam on cluster `c`.
    pub cost: Vec<Vec<f64>>,
    pub assignment: Assignment,
    pub agents: Vec<Agent>,
    /// Channel-set user indices of each cluster.
    pub members: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct MultiOutcome {
    pub codebook: Codebook,
    pub clusters: ClusterModel,
    pub clustered_users: Vec<usize>,
    pub degenerate_users: Vec<usize>,
    pub initial_beams: Vec<Beam>,
    pub cost: Vec<Vec<f64>>,
    pub assignment: Assignment,
    pub runs: Vec<AgentRun>,
}

/// Sensing, clustering, agent initialization and cluster assignment.
pub fn plan_multi(channels: &ChannelSet, cfg: &MultiConfig) -> Result<MultiPlan> {
    let phase_set = PhaseSet::new(cfg.bits)?;
    let m = channels.antennas();
    let sensing = cluster::make_sensing(cfg.sensing_beams, m, &phase_set, cfg.seed)?;
    let feats = cluster::user_features(channels.rows(), &sensing)?;
    if feats.users.len() < cfg.beams {
        return config(format!("{} usable users cannot fill {} clusters", feats.users.len(), cfg.beams));
    }
    let model = cluster::kmeans(&feats.features, cfg.beams, cfg.seed, cfg.kmeans_iters, cfg.kmeans_tol)?;
    let members: Vec<Vec<usize>> =
        model.members().into_iter().map(|c| c.into_iter().map(|i| feats.users[i]).collect()).collect();

    let agents = (0..cfg.beams)
        .map(|n| Agent::new(&cfg.hyper, m, cfg.seed, n as u64))
        .collect::<Result<Vec<_>>>()?;
    let origin = vec![0.0; m];
    let initial_beams: Vec<Beam> = agents.iter().map(|a| a.beam_at(&origin, &phase_set)).collect();
    let initial_book = Codebook::new(initial_beams.clone(), phase_set)?;
    let cluster_channels: Vec<Vec<&[Complex64]>> =
        members.iter().map(|us| us.iter().map(|&u| channels.user(u)).collect()).collect();
    let cost = cluster::cost_matrix(&initial_book, &cluster_channels)?;
    let assignment = cluster::assign(&cost)?;
    Ok(MultiPlan {
        phase_set,
        clusters: model,
        clustered_users: feats.users,
        degenerate_users: feats.degenerate,
        initial_beams,
        cost,
        assignment,
        agents,
        members,
    })
}

/// Clusters the users, matches clusters to agents and trains every agent
/// on its own cluster. Agents are independent and run in parallel.
pub fn train_multi(channels: &ChannelSet, cfg: &MultiConfig) -> Result<MultiOutcome> {
    let plan = plan_multi(channels, cfg)?;
    let MultiPlan { phase_set, clusters, clustered_users, degenerate_users, initial_beams, cost, assignment, agents, members } =
        plan;
    let jobs: Vec<(Agent, BeamEnv)> = agents
        .into_iter()
        .enumerate()
        .map(|(n, agent)| {
            let users = members[assignment.perm[n]].iter().map(|&u| channels.user(u).to_vec()).collect();
            let env = BeamEnv::new(users, phase_set, initial_beams[n].clone(), cfg.eta, cfg.seed, n as u64)?;
            Ok((agent, env))
        })
        .collect::<Result<_>>()?;
    let runs = jobs
        .into_par_iter()
        .map(|(agent, env)| train_with(agent, env, cfg.iters))
        .collect::<Result<Vec<_>>>()?;
    let codebook = Codebook::new(runs.iter().map(|r| r.best_beam.clone()).collect(), phase_set)?;
    Ok(MultiOutcome { codebook, clusters, clustered_users, degenerate_users, initial_beams, cost, assignment, runs })
}
