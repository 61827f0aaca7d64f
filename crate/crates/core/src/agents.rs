//! Offline actor-critic agents (DDPG, TD3, BCQ) trained from a fixed
//! replay buffer.
//!
//! Networks see actions in normalized box coordinates `u ∈ [-1, 1]^d`,
//! where `a = center + half ⊙ u`. Transitions, emitted actions and the BCQ
//! perturbation limit are all in action-space units.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{soft_update, Activation, AdamConfig, AdamState, Gradients, Mlp, NeuralError};

const NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const LOG_STD_MIN: f64 = -4.0;
const LOG_STD_MAX: f64 = 15.0;
const LATENT_CLIP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("{what} has dimension {have}, expected {want}")]
    Dimension {
        what: &'static str,
        have: usize,
        want: usize,
    },
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("invalid transition {index}: {detail}")]
    Transition { index: usize, detail: String },
    #[error("non-finite {what} in {algorithm} update; update aborted ({diagnostics})")]
    NonFinite {
        algorithm: Algorithm,
        what: &'static str,
        diagnostics: String,
    },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Ddpg,
    Td3,
    Bcq,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Ddpg, Algorithm::Td3, Algorithm::Bcq];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Ddpg => "ddpg",
            Algorithm::Td3 => "td3",
            Algorithm::Bcq => "bcq",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ddpg" => Ok(Algorithm::Ddpg),
            "td3" => Ok(Algorithm::Td3),
            "bcq" => Ok(Algorithm::Bcq),
            other => Err(AgentError::Config(format!(
                "unknown algorithm {other:?} (ddpg|td3|bcq)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Fixed transition store with seeded uniform sampling with replacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    transitions: Vec<Transition>,
    state_dimension: usize,
    action_dimension: usize,
    seed: u64,
    #[serde(with = "rng_state")]
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(transitions: Vec<Transition>, seed: u64) -> Result<Self, AgentError> {
        let first = transitions.first().ok_or(AgentError::EmptyBuffer)?;
        let (state_dimension, action_dimension) = (first.state.len(), first.action.len());
        for (index, t) in transitions.iter().enumerate() {
            let detail = if t.state.len() != state_dimension || t.next_state.len() != state_dimension {
                Some(format!(
                    "state dimensions {} / {}, expected {state_dimension}",
                    t.state.len(),
                    t.next_state.len()
                ))
            } else if t.action.len() != action_dimension {
                Some(format!(
                    "action dimension {}, expected {action_dimension}",
                    t.action.len()
                ))
            } else if !t.reward.is_finite() {
                Some("reward is not finite".to_string())
            } else if !t
                .state
                .iter()
                .chain(&t.next_state)
                .chain(&t.action)
                .all(|v| v.is_finite())
            {
                Some("non-finite feature".to_string())
            } else {
                None
            };
            if let Some(detail) = detail {
                return Err(AgentError::Transition { index, detail });
            }
        }
        Ok(Self {
            transitions,
            state_dimension,
            action_dimension,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn state_dimension(&self) -> usize {
        self.state_dimension
    }

    pub fn action_dimension(&self) -> usize {
        self.action_dimension
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sample_indices(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| self.rng.random_range(0..self.transitions.len()))
            .collect()
    }

    pub fn sample(&mut self, batch: usize) -> Vec<&Transition> {
        let indices = self.sample_indices(batch);
        indices.into_iter().map(|i| &self.transitions[i]).collect()
    }
}

/// Axis-aligned box every emitted action lies in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl ActionBox {
    pub const MARGIN: f64 = 0.1;
    /// Half-width used for a coordinate on which all actions agree.
    pub const FLAT_HALF_WIDTH: f64 = 1e-3;

    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self, AgentError> {
        if low.is_empty() || low.len() != high.len() {
            return Err(AgentError::Config(
                "action box bounds must be non-empty and equally long".into(),
            ));
        }
        if low
            .iter()
            .zip(&high)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h))
        {
            return Err(AgentError::Config(
                "action box needs finite low < high on every coordinate".into(),
            ));
        }
        Ok(Self { low, high })
    }

    /// Per-coordinate min/max of `actions`, widened by 10% of the range on
    /// each side.
    pub fn from_actions(actions: &[Vec<f64>]) -> Result<Self, AgentError> {
        let first = actions
            .first()
            .ok_or_else(|| AgentError::Config("no actions to bound".into()))?;
        let mut low = first.clone();
        let mut high = first.clone();
        for a in actions {
            if a.len() != first.len() {
                return Err(AgentError::Dimension {
                    what: "action",
                    have: a.len(),
                    want: first.len(),
                });
            }
            for ((l, h), &v) in low.iter_mut().zip(high.iter_mut()).zip(a) {
                *l = l.min(v);
                *h = h.max(v);
            }
        }
        for (l, h) in low.iter_mut().zip(high.iter_mut()) {
            let pad = (Self::MARGIN * (*h - *l)).max(Self::FLAT_HALF_WIDTH);
            *l -= pad;
            *h += pad;
        }
        Self::new(low, high)
    }

    pub fn dimension(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn center(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    pub fn contains(&self, action: &[f64]) -> bool {
        action.len() == self.dimension()
            && action
                .iter()
                .zip(self.low.iter().zip(&self.high))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn clamp(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }

    pub fn to_unit(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(v, (l, h))| (2.0 * v - l - h) / (h - l))
            .collect()
    }

    pub fn from_unit(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(u, (l, h))| (0.5 * (l + h) + 0.5 * (h - l) * u).clamp(*l, *h))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub actor_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub vae_learning_rate: f64,
    pub policy_delay: usize,
    pub target_noise: f64,
    pub noise_clip: f64,
    /// BCQ perturbation limit Φ, in action-space units.
    pub perturbation_limit: f64,
    pub candidates: usize,
    pub lambda: f64,
    /// Defaults to twice the action dimension.
    pub latent_dimension: Option<usize>,
    pub kl_weight: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ddpg,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 32,
            hidden: vec![64, 64],
            actor_learning_rate: 1e-4,
            critic_learning_rate: 1e-3,
            vae_learning_rate: 1e-3,
            policy_delay: 2,
            target_noise: 0.2,
            noise_clip: 0.5,
            perturbation_limit: 0.05,
            candidates: 10,
            lambda: 0.75,
            latent_dimension: None,
            kl_weight: 0.5,
        }
    }
}

impl AgentConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let fail = |m: &str| Err(AgentError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail("tau must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden layer sizes must be positive");
        }
        let rates = [
            self.actor_learning_rate,
            self.critic_learning_rate,
            self.vae_learning_rate,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return fail("learning rates must be positive");
        }
        if self.policy_delay == 0 {
            return fail("policy delay must be at least 1");
        }
        if !(self.target_noise >= 0.0 && self.noise_clip >= 0.0) {
            return fail("target noise and noise clip must be non-negative");
        }
        if !(self.perturbation_limit >= 0.0 && self.perturbation_limit.is_finite()) {
            return fail("perturbation limit must be non-negative");
        }
        if self.candidates == 0 {
            return fail("candidate count must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if self.latent_dimension == Some(0) {
            return fail("latent dimension must be positive");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return fail("KL weight must be non-negative");
        }
        Ok(())
    }

    fn sizes(&self, inputs: usize, outputs: usize) -> Vec<usize> {
        let mut sizes = vec![inputs];
        sizes.extend(&self.hidden);
        sizes.push(outputs);
        sizes
    }
}

/// Online network with a Polyak-averaged target copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tracked {
    pub online: Mlp,
    pub target: Mlp,
    pub optimizer: AdamState,
}

impl Tracked {
    fn new(online: Mlp, learning_rate: f64) -> Self {
        let optimizer = AdamState::new(&online, AdamConfig::with_learning_rate(learning_rate));
        Self {
            target: online.clone(),
            online,
            optimizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainable {
    pub net: Mlp,
    pub optimizer: AdamState,
}

impl Trainable {
    fn new(net: Mlp, learning_rate: f64) -> Self {
        let optimizer = AdamState::new(&net, AdamConfig::with_learning_rate(learning_rate));
        Self { net, optimizer }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "lowercase")]
pub enum Losses {
    Ddpg {
        critic: f64,
        actor: f64,
    },
    Td3 {
        critic1: f64,
        critic2: f64,
        actor: Option<f64>,
    },
    Bcq {
        vae: f64,
        critic: f64,
        perturbation: f64,
    },
}

impl Losses {
    /// Critic loss, averaged over twins where present.
    pub fn critic(&self) -> f64 {
        match *self {
            Losses::Ddpg { critic, .. } | Losses::Bcq { critic, .. } => critic,
            Losses::Td3 { critic1, critic2, .. } => 0.5 * (critic1 + critic2),
        }
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn q_value(critic: &Mlp, state: &[f64], unit_action: &[f64]) -> Result<f64, NeuralError> {
    Ok(critic.predict(&concat(state, unit_action))?[0])
}

fn batch_diagnostics(batch: &[&Transition]) -> String {
    let (lo, hi) = batch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
        (lo.min(t.reward), hi.max(t.reward))
    });
    let max_feature = batch
        .iter()
        .flat_map(|t| t.state.iter().chain(&t.action).chain(&t.next_state))
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    format!(
        "batch of {}, rewards in [{lo}, {hi}], max |feature| {max_feature}",
        batch.len()
    )
}

fn check_batch(batch: &[&Transition], state_dim: usize, action_dim: usize) -> Result<(), AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBuffer);
    }
    for t in batch {
        if t.state.len() != state_dim || t.next_state.len() != state_dim {
            return Err(AgentError::Dimension {
                what: "state",
                have: t.state.len().max(t.next_state.len()),
                want: state_dim,
            });
        }
        if t.action.len() != action_dim {
            return Err(AgentError::Dimension {
                what: "action",
                have: t.action.len(),
                want: action_dim,
            });
        }
    }
    Ok(())
}

fn finite_or(
    value: f64,
    grads: &Gradients,
    algorithm: Algorithm,
    what: &'static str,
    batch: &[&Transition],
) -> Result<(), AgentError> {
    if value.is_finite() && grads.is_finite() {
        Ok(())
    } else {
        Err(AgentError::NonFinite {
            algorithm,
            what,
            diagnostics: batch_diagnostics(batch),
        })
    }
}

/// One mean-squared-error step of `critic` toward `targets`; returns the
/// pre-step loss.
fn regress_critic(
    critic: &mut Tracked,
    inputs: &[Vec<f64>],
    targets: &[f64],
    algorithm: Algorithm,
    batch: &[&Transition],
) -> Result<f64, AgentError> {
    let n = inputs.len() as f64;
    let mut grads = Gradients::zeros_like(&critic.online);
    let mut loss = 0.0;
    for (x, y) in inputs.iter().zip(targets) {
        let cache = critic.online.forward(x)?;
        let diff = cache.output()[0] - y;
        loss += diff * diff;
        critic.online.backward_into(&cache, &[2.0 * diff / n], &mut grads)?;
    }
    loss /= n;
    finite_or(loss, &grads, algorithm, "critic loss", batch)?;
    critic.optimizer.step(&mut critic.online, &grads)?;
    Ok(loss)
}

/// Deterministic policy gradient step ascending `critic`; returns the
/// pre-step loss `-mean Q(s, π(s))`.
fn improve_actor(
    actor: &mut Tracked,
    critic: &Mlp,
    batch: &[&Transition],
    algorithm: Algorithm,
) -> Result<f64, AgentError> {
    let n = batch.len() as f64;
    let state_dim = actor.online.input_size();
    let mut grads = Gradients::zeros_like(&actor.online);
    let mut loss = 0.0;
    for t in batch {
        let cache = actor.online.forward(&t.state)?;
        let q_cache = critic.forward(&concat(&t.state, cache.output()))?;
        loss -= q_cache.output()[0];
        let dq = critic.input_gradient(&q_cache, &[1.0])?;
        let grad_out: Vec<f64> = dq[state_dim..].iter().map(|g| -g / n).collect();
        actor.online.backward_into(&cache, &grad_out, &mut grads)?;
    }
    loss /= n;
    finite_or(loss, &grads, algorithm, "actor loss", batch)?;
    actor.optimizer.step(&mut actor.online, &grads)?;
    Ok(loss)
}

fn soft_update_tracked(net: &mut Tracked, tau: f64) -> Result<(), NeuralError> {
    soft_update(&mut net.target, &net.online, tau)
}

fn check_state(state: &[f64], want: usize) -> Result<(), AgentError> {
    if state.len() != want {
        return Err(AgentError::Dimension {
            what: "state",
            have: state.len(),
            want,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ddpg {
    config: AgentConfig,
    bounds: ActionBox,
    state_dimension: usize,
    seed: u64,
    updates: u64,
    actor: Tracked,
    critic: Tracked,
}

impl Ddpg {
    pub fn new(config: AgentConfig, state_dimension: usize, bounds: ActionBox, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let a = bounds.dimension();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = Mlp::new(
            &config.sizes(state_dimension, a),
            Activation::Relu,
            Activation::Tanh,
            &mut rng,
        );
        let critic = Mlp::new(
            &config.sizes(state_dimension + a, 1),
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        Ok(Self {
            actor: Tracked::new(actor, config.actor_learning_rate),
            critic: Tracked::new(critic, config.critic_learning_rate),
            config,
            bounds,
            state_dimension,
            seed,
            updates: 0,
        })
    }

    pub fn actor(&self) -> &Tracked {
        &self.actor
    }

    pub fn actor_mut(&mut self) -> &mut Tracked {
        &mut self.actor
    }

    pub fn critic(&self) -> &Tracked {
        &self.critic
    }

    pub fn critic_mut(&mut self) -> &mut Tracked {
        &mut self.critic
    }

    pub fn select_action(&self, state: &[f64]) -> Result<Vec<f64>, AgentError> {
        check_state(state, self.state_dimension)?;
        Ok(self.bounds.from_unit(&self.actor.online.predict(state)?))
    }

    pub fn update(&mut self, batch: &[&Transition]) -> Result<Losses, AgentError> {
        check_batch(batch, self.state_dimension, self.bounds.dimension())?;
        let gamma = self.config.gamma;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for t in batch {
            let next_u = self.actor.target.predict(&t.next_state)?;
            let next_q = q_value(&self.critic.target, &t.next_state, &next_u)?;
            targets.push(t.reward + if t.terminal { 0.0 } else { gamma * next_q });
            inputs.push(concat(&t.state, &self.bounds.to_unit(&t.action)));
        }
        let critic = regress_critic(&mut self.critic, &inputs, &targets, Algorithm::Ddpg, batch)?;
        let actor = improve_actor(&mut self.actor, &self.critic.online, batch, Algorithm::Ddpg)?;
        soft_update_tracked(&mut self.actor, self.config.tau)?;
        soft_update_tracked(&mut self.critic, self.config.tau)?;
        self.updates += 1;
        Ok(Losses::Ddpg { critic, actor })
    }

    fn is_finite(&self) -> bool {
        [&self.actor, &self.critic]
            .iter()
            .all(|n| n.online.is_finite() && n.target.is_finite())
    }
}

/// Target values of one TD3 critic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwinTarget {
    pub q1: f64,
    pub q2: f64,
    /// `r + γ(1 − terminal)·min(q1, q2)`.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Td3 {
    config: AgentConfig,
    bounds: ActionBox,
    state_dimension: usize,
    seed: u64,
    updates: u64,
    actor: Tracked,
    critic1: Tracked,
    critic2: Tracked,
    #[serde(with = "rng_state")]
    rng: ChaCha8Rng,
}

impl Td3 {
    pub fn new(config: AgentConfig, state_dimension: usize, bounds: ActionBox, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let a = bounds.dimension();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = Mlp::new(
            &config.sizes(state_dimension, a),
            Activation::Relu,
            Activation::Tanh,
            &mut rng,
        );
        let critic_sizes = config.sizes(state_dimension + a, 1);
        let critic1 = Mlp::new(&critic_sizes, Activation::Relu, Activation::Identity, &mut rng);
        let critic2 = Mlp::new(&critic_sizes, Activation::Relu, Activation::Identity, &mut rng);
        Ok(Self {
            actor: Tracked::new(actor, config.actor_learning_rate),
            critic1: Tracked::new(critic1, config.critic_learning_rate),
            critic2: Tracked::new(critic2, config.critic_learning_rate),
            config,
            bounds,
            state_dimension,
            seed,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM),
        })
    }

    pub fn actor(&self) -> &Tracked {
        &self.actor
    }

    pub fn critics(&self) -> (&Tracked, &Tracked) {
        (&self.critic1, &self.critic2)
    }

    /// Makes the second critic an exact copy of the first.
    pub fn synchronize_twins(&mut self) {
        self.critic2 = self.critic1.clone();
    }

    pub fn select_action(&self, state: &[f64]) -> Result<Vec<f64>, AgentError> {
        check_state(state, self.state_dimension)?;
        Ok(self.bounds.from_unit(&self.actor.online.predict(state)?))
    }

    /// Smoothed clipped-double-Q targets; draws target-policy noise.
    pub fn compute_targets(&mut self, batch: &[&Transition]) -> Result<Vec<TwinTarget>, AgentError> {
        check_batch(batch, self.state_dimension, self.bounds.dimension())?;
        let (sigma, clip, gamma) = (self.config.target_noise, self.config.noise_clip, self.config.gamma);
        let mut out = Vec::with_capacity(batch.len());
        for t in batch {
            let mut u = self.actor.target.predict(&t.next_state)?;
            for ui in &mut u {
                let noise: f64 = self.rng.sample(StandardNormal);
                *ui = (*ui + (sigma * noise).clamp(-clip, clip)).clamp(-1.0, 1.0);
            }
            let q1 = q_value(&self.critic1.target, &t.next_state, &u)?;
            let q2 = q_value(&self.critic2.target, &t.next_state, &u)?;
            let value = t.reward + if t.terminal { 0.0 } else { gamma * q1.min(q2) };
            out.push(TwinTarget { q1, q2, value });
        }
        Ok(out)
    }

    pub fn update(&mut self, batch: &[&Transition]) -> Result<Losses, AgentError> {
        let targets: Vec<f64> = self.compute_targets(batch)?.iter().map(|t| t.value).collect();
        let inputs: Vec<Vec<f64>> = batch
            .iter()
            .map(|t| concat(&t.state, &self.bounds.to_unit(&t.action)))
            .collect();
        let critic1 = regress_critic(&mut self.critic1, &inputs, &targets, Algorithm::Td3, batch)?;
        let critic2 = regress_critic(&mut self.critic2, &inputs, &targets, Algorithm::Td3, batch)?;
        self.updates += 1;
        let actor = if self.updates.is_multiple_of(self.config.policy_delay as u64) {
            let loss = improve_actor(&mut self.actor, &self.critic1.online, batch, Algorithm::Td3)?;
            let tau = self.config.tau;
            soft_update_tracked(&mut self.actor, tau)?;
            soft_update_tracked(&mut self.critic1, tau)?;
            soft_update_tracked(&mut self.critic2, tau)?;
            Some(loss)
        } else {
            None
        };
        Ok(Losses::Td3 {
            critic1,
            critic2,
            actor,
        })
    }

    fn is_finite(&self) -> bool {
        [&self.actor, &self.critic1, &self.critic2]
            .iter()
            .all(|n| n.online.is_finite() && n.target.is_finite())
    }
}

/// One BCQ candidate: a decoder sample and its bounded perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub decoded: Vec<f64>,
    pub perturbed: Vec<f64>,
    pub q1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bcq {
    config: AgentConfig,
    bounds: ActionBox,
    state_dimension: usize,
    latent_dimension: usize,
    seed: u64,
    updates: u64,
    encoder: Trainable,
    decoder: Trainable,
    perturbation: Tracked,
    critic1: Tracked,
    critic2: Tracked,
    #[serde(with = "rng_state")]
    rng: ChaCha8Rng,
}

impl Bcq {
    pub fn new(config: AgentConfig, state_dimension: usize, bounds: ActionBox, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let a = bounds.dimension();
        let latent = config.latent_dimension.unwrap_or(2 * a);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let relu = Activation::Relu;
        let encoder = Mlp::new(
            &config.sizes(state_dimension + a, 2 * latent),
            relu,
            Activation::Identity,
            &mut rng,
        );
        let decoder = Mlp::new(
            &config.sizes(state_dimension + latent, a),
            relu,
            Activation::Tanh,
            &mut rng,
        );
        let perturbation = Mlp::new(&config.sizes(state_dimension + a, a), relu, Activation::Tanh, &mut rng);
        let critic_sizes = config.sizes(state_dimension + a, 1);
        let critic1 = Mlp::new(&critic_sizes, relu, Activation::Identity, &mut rng);
        let critic2 = Mlp::new(&critic_sizes, relu, Activation::Identity, &mut rng);
        Ok(Self {
            encoder: Trainable::new(encoder, config.vae_learning_rate),
            decoder: Trainable::new(decoder, config.vae_learning_rate),
            perturbation: Tracked::new(perturbation, config.actor_learning_rate),
            critic1: Tracked::new(critic1, config.critic_learning_rate),
            critic2: Tracked::new(critic2, config.critic_learning_rate),
            config,
            bounds,
            state_dimension,
            latent_dimension: latent,
            seed,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM),
        })
    }

    pub fn latent_dimension(&self) -> usize {
        self.latent_dimension
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder.net
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder.net
    }

    pub fn perturbation(&self) -> &Tracked {
        &self.perturbation
    }

    pub fn critics(&self) -> (&Tracked, &Tracked) {
        (&self.critic1, &self.critic2)
    }

    /// Standard normal latent clipped to `[-0.5, 0.5]`.
    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        clipped_latent(self.latent_dimension, rng)
    }

    /// Decoder output for `latent`, in action units.
    pub fn decode(&self, state: &[f64], latent: &[f64]) -> Result<Vec<f64>, AgentError> {
        Ok(self
            .bounds
            .from_unit(&self.decoder.net.predict(&concat(state, latent))?))
    }

    /// `decoded` moved by `Φ·ξ(s, a)` and clamped back into the box.
    fn perturb(&self, net: &Mlp, state: &[f64], decoded: &[f64]) -> Result<Vec<f64>, AgentError> {
        let xi = net.predict(&concat(state, &self.bounds.to_unit(decoded)))?;
        let phi = self.config.perturbation_limit;
        let moved: Vec<f64> = decoded.iter().zip(&xi).map(|(a, x)| a + phi * x).collect();
        Ok(self.bounds.clamp(&moved))
    }

    pub fn candidates<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Candidate>, AgentError> {
        check_state(state, self.state_dimension)?;
        (0..n)
            .map(|_| {
                let decoded = self.decode(state, &self.sample_latent(rng))?;
                let perturbed = self.perturb(&self.perturbation.online, state, &decoded)?;
                let q1 = q_value(&self.critic1.online, state, &self.bounds.to_unit(&perturbed))?;
                Ok(Candidate { decoded, perturbed, q1 })
            })
            .collect()
    }

    /// Best `λ·min + (1 − λ)·max` twin-target value over the candidates
    /// decoded from `latents` at `next_state`.
    pub fn target_value(&self, next_state: &[f64], latents: &[Vec<f64>]) -> Result<f64, AgentError> {
        check_state(next_state, self.state_dimension)?;
        let lambda = self.config.lambda;
        let mut best = f64::NEG_INFINITY;
        for z in latents {
            let decoded = self.decode(next_state, z)?;
            let u = self
                .bounds
                .to_unit(&self.perturb(&self.perturbation.target, next_state, &decoded)?);
            let q1 = q_value(&self.critic1.target, next_state, &u)?;
            let q2 = q_value(&self.critic2.target, next_state, &u)?;
            best = best.max(lambda * q1.min(q2) + (1.0 - lambda) * q1.max(q2));
        }
        Ok(best)
    }

    /// Highest-Q1 candidate among `n` draws from a generator seeded by the
    /// agent seed and the state bits, so repeated calls agree.
    pub fn select_action(&self, state: &[f64]) -> Result<Vec<f64>, AgentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ state_hash(state));
        let candidates = self.candidates(state, self.config.candidates, &mut rng)?;
        let best = candidates
            .into_iter()
            .reduce(|best, c| if c.q1 > best.q1 { c } else { best })
            .expect("at least one candidate");
        Ok(best.perturbed)
    }

    fn vae_step(&mut self, batch: &[&Transition]) -> Result<f64, AgentError> {
        let (b, a, l) = (batch.len() as f64, self.bounds.dimension(), self.latent_dimension);
        let s = self.state_dimension;
        let kl_weight = self.config.kl_weight;
        let mut enc_grads = Gradients::zeros_like(&self.encoder.net);
        let mut dec_grads = Gradients::zeros_like(&self.decoder.net);
        let (mut recon, mut kl) = (0.0, 0.0);
        for t in batch {
            let u = self.bounds.to_unit(&t.action);
            let enc = self.encoder.net.forward(&concat(&t.state, &u))?;
            let (mean, raw_log_std) = enc.output().split_at(l);
            let mut z = Vec::with_capacity(l);
            let mut noise = Vec::with_capacity(l);
            for (m, r) in mean.iter().zip(raw_log_std) {
                let e: f64 = self.rng.sample(StandardNormal);
                z.push(m + r.clamp(LOG_STD_MIN, LOG_STD_MAX).exp() * e);
                noise.push(e);
            }
            let dec = self.decoder.net.forward(&concat(&t.state, &z))?;
            let mut grad_dec = Vec::with_capacity(a);
            for (rec, target) in dec.output().iter().zip(&u) {
                let d = rec - target;
                recon += d * d;
                grad_dec.push(2.0 * d / (b * a as f64));
            }
            let dx = self.decoder.net.backward_into(&dec, &grad_dec, &mut dec_grads)?;
            let dz = &dx[s..];
            let kl_scale = kl_weight / (b * l as f64);
            let mut grad_enc = vec![0.0; 2 * l];
            for j in 0..l {
                let ls = raw_log_std[j].clamp(LOG_STD_MIN, LOG_STD_MAX);
                let var = (2.0 * ls).exp();
                kl += -0.5 * (1.0 + 2.0 * ls - mean[j] * mean[j] - var);
                grad_enc[j] = dz[j] + kl_scale * mean[j];
                if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_log_std[j]) {
                    grad_enc[l + j] = dz[j] * ls.exp() * noise[j] + kl_scale * (var - 1.0);
                }
            }
            self.encoder.net.backward_into(&enc, &grad_enc, &mut enc_grads)?;
        }
        let loss = recon / (b * a as f64) + kl_weight * kl / (b * l as f64);
        finite_or(loss, &dec_grads, Algorithm::Bcq, "VAE loss", batch)?;
        finite_or(loss, &enc_grads, Algorithm::Bcq, "VAE loss", batch)?;
        self.decoder.optimizer.step(&mut self.decoder.net, &dec_grads)?;
        self.encoder.optimizer.step(&mut self.encoder.net, &enc_grads)?;
        Ok(loss)
    }

    fn perturbation_step(&mut self, batch: &[&Transition]) -> Result<f64, AgentError> {
        let n = batch.len() as f64;
        let s = self.state_dimension;
        let phi = self.config.perturbation_limit;
        let half = self.bounds.half_widths();
        let mut grads = Gradients::zeros_like(&self.perturbation.online);
        let mut loss = 0.0;
        for t in batch {
            let z = clipped_latent(self.latent_dimension, &mut self.rng);
            let decoded = self.decode(&t.state, &z)?;
            let cache = self
                .perturbation
                .online
                .forward(&concat(&t.state, &self.bounds.to_unit(&decoded)))?;
            let moved: Vec<f64> = decoded.iter().zip(cache.output()).map(|(d, x)| d + phi * x).collect();
            let perturbed = self.bounds.clamp(&moved);
            let q_cache = self
                .critic1
                .online
                .forward(&concat(&t.state, &self.bounds.to_unit(&perturbed)))?;
            loss -= q_cache.output()[0];
            let dq = self.critic1.online.input_gradient(&q_cache, &[1.0])?;
            let grad_out: Vec<f64> = (0..half.len())
                .map(|i| {
                    if moved[i] != perturbed[i] {
                        0.0
                    } else {
                        -phi * dq[s + i] / (half[i] * n)
                    }
                })
                .collect();
            self.perturbation.online.backward_into(&cache, &grad_out, &mut grads)?;
        }
        loss /= n;
        finite_or(loss, &grads, Algorithm::Bcq, "perturbation loss", batch)?;
        self.perturbation
            .optimizer
            .step(&mut self.perturbation.online, &grads)?;
        Ok(loss)
    }

    pub fn update(&mut self, batch: &[&Transition]) -> Result<Losses, AgentError> {
        check_batch(batch, self.state_dimension, self.bounds.dimension())?;
        let vae = self.vae_step(batch)?;

        let gamma = self.config.gamma;
        let mut targets = Vec::with_capacity(batch.len());
        for t in batch {
            let value = if t.terminal {
                0.0
            } else {
                let latents: Vec<Vec<f64>> = (0..self.config.candidates)
                    .map(|_| clipped_latent(self.latent_dimension, &mut self.rng))
                    .collect();
                self.target_value(&t.next_state, &latents)?
            };
            targets.push(t.reward + gamma * value);
        }
        let inputs: Vec<Vec<f64>> = batch
            .iter()
            .map(|t| concat(&t.state, &self.bounds.to_unit(&t.action)))
            .collect();
        let c1 = regress_critic(&mut self.critic1, &inputs, &targets, Algorithm::Bcq, batch)?;
        let c2 = regress_critic(&mut self.critic2, &inputs, &targets, Algorithm::Bcq, batch)?;

        let perturbation = self.perturbation_step(batch)?;
        let tau = self.config.tau;
        soft_update_tracked(&mut self.critic1, tau)?;
        soft_update_tracked(&mut self.critic2, tau)?;
        soft_update_tracked(&mut self.perturbation, tau)?;
        self.updates += 1;
        Ok(Losses::Bcq {
            vae,
            critic: 0.5 * (c1 + c2),
            perturbation,
        })
    }

    fn is_finite(&self) -> bool {
        self.encoder.net.is_finite()
            && self.decoder.net.is_finite()
            && [&self.perturbation, &self.critic1, &self.critic2]
                .iter()
                .all(|n| n.online.is_finite() && n.target.is_finite())
    }
}

/// Generator position as seed, stream and word offset; the offset is split
/// into two `u64` halves because JSON has no 128-bit integers.
mod rng_state {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct State {
        seed: [u8; 32],
        stream: u64,
        word_pos_high: u64,
        word_pos_low: u64,
    }

    pub fn serialize<S: Serializer>(rng: &ChaCha8Rng, serializer: S) -> Result<S::Ok, S::Error> {
        let pos = rng.get_word_pos();
        State {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_high: (pos >> 64) as u64,
            word_pos_low: pos as u64,
        }
        .serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<ChaCha8Rng, D::Error> {
        let s = State::deserialize(deserializer)?;
        let mut rng = ChaCha8Rng::from_seed(s.seed);
        rng.set_stream(s.stream);
        rng.set_word_pos((u128::from(s.word_pos_high) << 64) | u128::from(s.word_pos_low));
        Ok(rng)
    }
}

fn clipped_latent<R: Rng + ?Sized>(dimension: usize, rng: &mut R) -> Vec<f64> {
    (0..dimension)
        .map(|_| rng.sample::<f64, _>(StandardNormal).clamp(-LATENT_CLIP, LATENT_CLIP))
        .collect()
}

fn state_hash(state: &[f64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for v in state {
        for byte in v.to_bits().to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum Agent {
    Ddpg(Ddpg),
    Td3(Td3),
    Bcq(Bcq),
}

macro_rules! each {
    ($agent:expr, $a:ident => $body:expr) => {
        match $agent {
            Agent::Ddpg($a) => $body,
            Agent::Td3($a) => $body,
            Agent::Bcq($a) => $body,
        }
    };
}

impl Agent {
    pub fn new(config: AgentConfig, state_dimension: usize, bounds: ActionBox, seed: u64) -> Result<Self, AgentError> {
        Ok(match config.algorithm {
            Algorithm::Ddpg => Agent::Ddpg(Ddpg::new(config, state_dimension, bounds, seed)?),
            Algorithm::Td3 => Agent::Td3(Td3::new(config, state_dimension, bounds, seed)?),
            Algorithm::Bcq => Agent::Bcq(Bcq::new(config, state_dimension, bounds, seed)?),
        })
    }

    pub fn algorithm(&self) -> Algorithm {
        match self {
            Agent::Ddpg(_) => Algorithm::Ddpg,
            Agent::Td3(_) => Algorithm::Td3,
            Agent::Bcq(_) => Algorithm::Bcq,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        each!(self, a => &a.config)
    }

    pub fn bounds(&self) -> &ActionBox {
        each!(self, a => &a.bounds)
    }

    pub fn state_dimension(&self) -> usize {
        each!(self, a => a.state_dimension)
    }

    pub fn action_dimension(&self) -> usize {
        self.bounds().dimension()
    }

    pub fn seed(&self) -> u64 {
        each!(self, a => a.seed)
    }

    pub fn updates(&self) -> u64 {
        each!(self, a => a.updates)
    }

    pub fn update(&mut self, batch: &[&Transition]) -> Result<Losses, AgentError> {
        each!(self, a => a.update(batch))
    }

    pub fn select_action(&self, state: &[f64]) -> Result<Vec<f64>, AgentError> {
        each!(self, a => a.select_action(state))
    }

    pub fn is_finite(&self) -> bool {
        each!(self, a => a.is_finite())
    }

    /// Number of update calls in one epoch over `buffer_len` transitions.
    pub fn updates_per_epoch(&self, buffer_len: usize) -> usize {
        buffer_len.div_ceil(self.config().batch_size)
    }

    /// One epoch of uniformly resampled updates; returns the mean losses.
    pub fn run_epoch(&mut self, buffer: &mut ReplayBuffer) -> Result<Losses, AgentError> {
        if buffer.is_empty() {
            return Err(AgentError::EmptyBuffer);
        }
        let steps = self.updates_per_epoch(buffer.len());
        let batch_size = self.config().batch_size;
        let mut sum: Option<Losses> = None;
        for _ in 0..steps {
            let batch = buffer.sample(batch_size);
            let losses = self.update(&batch)?;
            sum = Some(match sum {
                None => losses,
                Some(acc) => add_losses(acc, losses),
            });
        }
        Ok(scale_losses(sum.expect("at least one update"), steps as f64))
    }
}

fn add_losses(a: Losses, b: Losses) -> Losses {
    match (a, b) {
        (Losses::Ddpg { critic, actor }, Losses::Ddpg { critic: c, actor: ac }) => Losses::Ddpg {
            critic: critic + c,
            actor: actor + ac,
        },
        (
            Losses::Td3 {
                critic1,
                critic2,
                actor,
            },
            Losses::Td3 {
                critic1: c1,
                critic2: c2,
                actor: ac,
            },
        ) => Losses::Td3 {
            critic1: critic1 + c1,
            critic2: critic2 + c2,
            actor: match (actor, ac) {
                (Some(x), Some(y)) => Some(x + y),
                (x, y) => x.or(y),
            },
        },
        (
            Losses::Bcq {
                vae,
                critic,
                perturbation,
            },
            Losses::Bcq {
                vae: v,
                critic: c,
                perturbation: p,
            },
        ) => Losses::Bcq {
            vae: vae + v,
            critic: critic + c,
            perturbation: perturbation + p,
        },
        (a, _) => a,
    }
}

fn scale_losses(losses: Losses, steps: f64) -> Losses {
    match losses {
        Losses::Ddpg { critic, actor } => Losses::Ddpg {
            critic: critic / steps,
            actor: actor / steps,
        },
        // The actor runs on every d-th call only; its mean is over all calls.
        Losses::Td3 {
            critic1,
            critic2,
            actor,
        } => Losses::Td3 {
            critic1: critic1 / steps,
            critic2: critic2 / steps,
            actor: actor.map(|x| x / steps),
        },
        Losses::Bcq {
            vae,
            critic,
            perturbation,
        } => Losses::Bcq {
            vae: vae / steps,
            critic: critic / steps,
            perturbation: perturbation / steps,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: usize = 5;
    const A: usize = 3;

    fn bounds() -> ActionBox {
        ActionBox::new(vec![-1.0, -0.5, 0.0], vec![1.0, 0.5, 2.0]).unwrap()
    }

    fn batch(seed: u64, n: usize, reward: impl Fn(&[f64], &[f64]) -> f64) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = bounds();
        (0..n)
            .map(|i| {
                let state: Vec<f64> = (0..S).map(|_| rng.random_range(-1.0..1.0)).collect();
                let u: Vec<f64> = (0..A).map(|_| rng.random_range(-0.8..0.8)).collect();
                let action = b.from_unit(&u);
                Transition {
                    reward: reward(&state, &action),
                    next_state: (0..S).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    state,
                    action,
                    terminal: i % 7 == 6,
                }
            })
            .collect()
    }

    fn refs(ts: &[Transition]) -> Vec<&Transition> {
        ts.iter().collect()
    }

    fn config(algorithm: Algorithm) -> AgentConfig {
        AgentConfig {
            hidden: vec![16, 16],
            ..AgentConfig::for_algorithm(algorithm)
        }
    }

    #[test]
    fn config_validation() {
        assert!(AgentConfig::default().validate().is_ok());
        let bad = [
            AgentConfig {
                gamma: 1.0,
                ..AgentConfig::default()
            },
            AgentConfig {
                policy_delay: 0,
                ..AgentConfig::default()
            },
            AgentConfig {
                perturbation_limit: -0.1,
                ..AgentConfig::default()
            },
            AgentConfig {
                candidates: 0,
                ..AgentConfig::default()
            },
            AgentConfig {
                lambda: 1.5,
                ..AgentConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(AgentError::Config(_))), "{c:?}");
        }
        assert_eq!("TD3".parse::<Algorithm>().unwrap(), Algorithm::Td3);
        assert!("ppo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn action_box_widens_by_ten_percent() {
        let b = ActionBox::from_actions(&[vec![0.0, 1.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(b.low()[0], -0.2);
        assert!((b.high()[0] - 2.2).abs() < 1e-15);
        assert!(b.low()[1] < 1.0 && b.high()[1] > 1.0);
        let u = b.to_unit(&[1.0, 1.0]);
        assert!(u.iter().all(|v| v.abs() < 1e-12));
        let corner = b.from_unit(&[1.0, -1.0]);
        assert!((corner[0] - b.high()[0]).abs() < 1e-12 && (corner[1] - b.low()[1]).abs() < 1e-12);
    }

    #[test]
    fn replay_sampling_is_seeded() {
        let ts = batch(1, 10, |_, _| 0.0);
        let mut a = ReplayBuffer::new(ts.clone(), 9).unwrap();
        let mut b = ReplayBuffer::new(ts, 9).unwrap();
        let first = a.sample_indices(32);
        assert_eq!(first.len(), 32);
        assert_eq!(first, b.sample_indices(32));
        assert!(first.iter().all(|&i| i < 10));
    }

    #[test]
    fn replay_rejects_bad_transitions() {
        let mut ts = batch(1, 3, |_, _| 0.0);
        ts[2].reward = f64::NAN;
        assert!(matches!(
            ReplayBuffer::new(ts, 0),
            Err(AgentError::Transition { index: 2, .. })
        ));
        assert!(matches!(ReplayBuffer::new(Vec::new(), 0), Err(AgentError::EmptyBuffer)));
    }

    #[test]
    fn zero_critic_zero_reward_gives_zero_loss() {
        let mut agent = Ddpg::new(
            AgentConfig {
                gamma: 0.0,
                ..config(Algorithm::Ddpg)
            },
            S,
            bounds(),
            3,
        )
        .unwrap();
        let critic = agent.critic_mut();
        for net in [&mut critic.online, &mut critic.target] {
            let last = net.layers_mut().last_mut().unwrap();
            last.weights.iter_mut().for_each(|w| *w = 0.0);
            last.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let ts = batch(2, 8, |_, _| 0.0);
        match agent.update(&refs(&ts)).unwrap() {
            Losses::Ddpg { critic, .. } => assert_eq!(critic, 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gamma_zero_critic_regresses_reward() {
        let mut agent = Ddpg::new(
            AgentConfig {
                gamma: 0.0,
                ..AgentConfig::default()
            },
            S,
            bounds(),
            11,
        )
        .unwrap();
        let ts = batch(4, 32, |s, a| 0.5 * s[0] - 0.3 * a[1] + 0.2 * s[2] * a[0]);
        let b = refs(&ts);
        for _ in 0..500 {
            agent.update(&b).unwrap();
        }
        let mse = ts
            .iter()
            .map(|t| {
                let q = q_value(&agent.critic().online, &t.state, &agent.bounds.to_unit(&t.action)).unwrap();
                (q - t.reward).powi(2)
            })
            .sum::<f64>()
            / ts.len() as f64;
        assert!(mse < 1e-2, "mse {mse}");
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        for algorithm in Algorithm::ALL {
            let ts = batch(5, 16, |s, _| s[1]);
            let mut a = Agent::new(config(algorithm), S, bounds(), 8).unwrap();
            let mut b = Agent::new(config(algorithm), S, bounds(), 8).unwrap();
            for _ in 0..5 {
                assert_eq!(a.update(&refs(&ts)).unwrap(), b.update(&refs(&ts)).unwrap());
            }
            assert_eq!(a, b);
            assert!(a.is_finite());
        }
    }

    #[test]
    fn td3_without_noise_or_delay_matches_ddpg() {
        let cfg = AgentConfig {
            target_noise: 0.0,
            policy_delay: 1,
            ..config(Algorithm::Td3)
        };
        let mut ddpg = Ddpg::new(cfg.clone(), S, bounds(), 21).unwrap();
        let mut td3 = Td3::new(cfg, S, bounds(), 21).unwrap();
        td3.synchronize_twins();
        assert_eq!(ddpg.critic().online, td3.critics().0.online);
        for round in 0..20 {
            let ts = batch(100 + round, 8, |s, a| s[0] * a[2]);
            let (d, t) = (ddpg.update(&refs(&ts)).unwrap(), td3.update(&refs(&ts)).unwrap());
            match (d, t) {
                (
                    Losses::Ddpg { critic, actor },
                    Losses::Td3 {
                        critic1,
                        critic2,
                        actor: Some(a),
                    },
                ) => {
                    assert_eq!(critic, critic1);
                    assert_eq!(critic, critic2);
                    assert_eq!(actor, a);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn td3_actor_moves_only_on_even_calls() {
        let mut td3 = Td3::new(config(Algorithm::Td3), S, bounds(), 4).unwrap();
        let ts = batch(6, 8, |s, _| s[0]);
        for call in 1..=6 {
            let before = td3.actor().online.clone();
            let losses = td3.update(&refs(&ts)).unwrap();
            let moved = td3.actor().online != before;
            assert_eq!(moved, call % 2 == 0, "call {call}");
            assert!(matches!(losses, Losses::Td3 { actor, .. } if actor.is_some() == moved));
        }
    }

    #[test]
    fn td3_target_is_min_of_twins() {
        let mut td3 = Td3::new(config(Algorithm::Td3), S, bounds(), 4).unwrap();
        let ts = batch(7, 32, |s, _| s[3]);
        for t in td3.compute_targets(&refs(&ts)).unwrap().iter().zip(&ts) {
            let (target, tr) = t;
            let m = target.q1.min(target.q2);
            assert!(m <= target.q1 && m <= target.q2);
            let expected = tr.reward + if tr.terminal { 0.0 } else { 0.99 * m };
            assert_eq!(target.value, expected);
        }
    }

    #[test]
    fn untrained_zero_actor_emits_box_center() {
        let mut agent = Ddpg::new(config(Algorithm::Ddpg), S, bounds(), 1).unwrap();
        let last = agent.actor_mut().online.layers_mut().last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        let action = agent.select_action(&[0.3; S]).unwrap();
        let center = bounds().center();
        for (a, c) in action.iter().zip(&center) {
            assert!((a - c).abs() < 1e-15);
        }
        assert!(matches!(
            agent.select_action(&[0.0; 2]),
            Err(AgentError::Dimension { .. })
        ));
    }

    #[test]
    fn bcq_zero_limit_keeps_decoder_outputs() {
        let bcq = Bcq::new(
            AgentConfig {
                perturbation_limit: 0.0,
                ..config(Algorithm::Bcq)
            },
            S,
            bounds(),
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in bcq.candidates(&[0.1; S], 50, &mut rng).unwrap() {
            assert_eq!(c.decoded, c.perturbed);
        }
    }

    #[test]
    fn bcq_perturbation_is_bounded() {
        let mut bcq = Bcq::new(config(Algorithm::Bcq), S, bounds(), 2).unwrap();
        let ts = batch(3, 32, |s, a| s[0] + a[0]);
        for _ in 0..20 {
            bcq.update(&refs(&ts)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in &ts {
            for c in bcq.candidates(&t.state, 10, &mut rng).unwrap() {
                let gap = c
                    .decoded
                    .iter()
                    .zip(&c.perturbed)
                    .map(|(d, p)| (d - p).abs())
                    .fold(0.0, f64::max);
                assert!(gap <= 0.05 + 1e-15, "{gap}");
                assert!(bounds().contains(&c.perturbed));
            }
        }
    }

    #[test]
    fn bcq_single_candidate_target_is_min_twin() {
        let bcq = Bcq::new(
            AgentConfig {
                candidates: 1,
                lambda: 1.0,
                ..config(Algorithm::Bcq)
            },
            S,
            bounds(),
            6,
        )
        .unwrap();
        let s = [0.2, -0.1, 0.4, 0.0, 0.9];
        let z: Vec<f64> = (0..bcq.latent_dimension()).map(|i| 0.1 * i as f64 - 0.2).collect();

        let b = bounds();
        let u_dec = bcq.decoder().predict(&[&s[..], &z[..]].concat()).unwrap();
        let decoded = b.from_unit(&u_dec);
        let xi = bcq
            .perturbation()
            .target
            .predict(&[&s[..], &b.to_unit(&decoded)[..]].concat())
            .unwrap();
        let moved: Vec<f64> = decoded.iter().zip(&xi).map(|(d, x)| d + 0.05 * x).collect();
        let u = b.to_unit(&b.clamp(&moved));
        let input = [&s[..], &u[..]].concat();
        let (c1, c2) = bcq.critics();
        let expected = c1.target.predict(&input).unwrap()[0].min(c2.target.predict(&input).unwrap()[0]);

        assert_eq!(bcq.target_value(&s, &[z]).unwrap(), expected);
    }

    #[test]
    fn bcq_vae_collapses_onto_single_action() {
        let cfg = AgentConfig {
            vae_learning_rate: 3e-3,
            ..AgentConfig::for_algorithm(Algorithm::Bcq)
        };
        let target = vec![0.4, -0.2, 1.5];
        let mut ts = batch(8, 32, |_, _| 0.0);
        for t in &mut ts {
            t.action = target.clone();
        }
        for seed in 10..13 {
            let mut bcq = Bcq::new(cfg.clone(), S, bounds(), seed).unwrap();
            for _ in 0..2000 {
                bcq.vae_step(&refs(&ts)).unwrap();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mean_err = ts
                .iter()
                .map(|t| {
                    let decoded = bcq.decode(&t.state, &bcq.sample_latent(&mut rng)).unwrap();
                    decoded
                        .iter()
                        .zip(&target)
                        .map(|(d, a)| (d - a).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / ts.len() as f64;
            assert!(mean_err < 1e-2, "seed {seed}: {mean_err}");
        }
    }

    #[test]
    fn selected_actions_stay_in_box_and_repeat() {
        let ts = batch(9, 32, |s, a| s[0] - a[1]);
        for algorithm in Algorithm::ALL {
            let mut agent = Agent::new(config(algorithm), S, bounds(), 3).unwrap();
            for _ in 0..10 {
                agent.update(&refs(&ts)).unwrap();
            }
            for t in &ts {
                let a = agent.select_action(&t.state).unwrap();
                assert!(agent.bounds().contains(&a), "{algorithm}: {a:?}");
                assert_eq!(a, agent.select_action(&t.state).unwrap());
            }
        }
    }

    #[test]
    fn non_finite_reward_aborts_update() {
        let mut agent = Agent::new(config(Algorithm::Ddpg), S, bounds(), 3).unwrap();
        let before = agent.clone();
        let mut ts = batch(9, 4, |_, _| 0.0);
        ts[1].reward = f64::INFINITY;
        let err = agent.update(&refs(&ts)).unwrap_err();
        assert!(matches!(err, AgentError::NonFinite { .. }), "{err}");
        assert!(err.to_string().contains("batch of 4"));
        assert_eq!(agent, before);
    }

    #[test]
    fn agent_round_trips_through_json() {
        let mut agent = Agent::new(config(Algorithm::Bcq), S, bounds(), 3).unwrap();
        let ts = batch(9, 8, |s, _| s[0]);
        agent.update(&refs(&ts)).unwrap();
        let json = serde_json::to_string(&agent).unwrap();
        let back: Agent = serde_json::from_str(&json).unwrap();
        assert_eq!(agent, back);
    }

    #[test]
    fn epoch_length_rounds_up() {
        let agent = Agent::new(config(Algorithm::Ddpg), S, bounds(), 3).unwrap();
        assert_eq!(agent.updates_per_epoch(64), 2);
        assert_eq!(agent.updates_per_epoch(65), 3);
    }
}
