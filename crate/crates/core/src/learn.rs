//! Per-device actor-critic learning driven by the consensus reward.
//!
//! Each device owns a softmax-policy MLP actor and a linear critic. After
//! every device has acted, the local rewards are gossiped; each device then
//! scores its previous action with the TD error
//! `delta = r~ + gamma V(newest window) - V(shifted window)`, updates its
//! critic, recomputes `delta` with the new critic, and takes a policy
//! gradient step on `log pi(previous action | shifted window)`.
//! Devices never read each other's parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusTopology;
use crate::error::{Error, Result};
use crate::mdp::{HistoryBuffer, Observation, Window};
use crate::nn::{dot, softmax2, Activation, Mlp, Trace};
use crate::sim::Action;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            alpha: 0.006,
            beta: 0.003,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::config("alpha", "must be positive"));
        }
        if !self.beta.is_finite() || self.beta <= 0.0 {
            return Err(Error::config("beta", "must be positive"));
        }
        Ok(())
    }
}

/// Direction of the critic step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticSign {
    /// Semi-gradient TD(0): `w += beta * delta * grad V`.
    #[default]
    SemiGradient,
    /// `w -= beta * delta * grad V`, as the update line is literally printed.
    Literal,
}

impl CriticSign {
    fn factor(self) -> f64 {
        match self {
            CriticSign::SemiGradient => 1.0,
            CriticSign::Literal => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    /// `V(x) = [x; 1] . w`.
    #[default]
    Linear,
    /// A stack of activation-free dense layers; still linear in the input.
    DeepLinear,
}

/// Network shapes shared by every device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl NetShape {
    pub fn widths(&self, output: usize) -> Vec<usize> {
        let mut w = vec![self.feature_dim];
        w.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        w.push(output);
        w
    }
}

/// Softmax policy over {wait, transmit}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub net: Mlp,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Self {
        Self {
            net: Mlp::new(&shape.widths(2), Activation::Relu, rng),
        }
    }

    pub fn from_net(net: Mlp) -> Self {
        Self { net }
    }

    /// `(p_wait, p_transmit)`.
    pub fn policy_forward(&self, features: &[f64], trace: &mut Trace) -> Result<[f64; 2]> {
        self.net.forward(features, trace)?;
        Ok(softmax2(trace.output()))
    }

    pub fn probabilities(&self, features: &[f64]) -> Result<[f64; 2]> {
        let mut t = self.net.new_trace();
        self.policy_forward(features, &mut t)
    }

    /// Fills `trace` with the gradient of `log pi(action | features)`.
    pub fn log_prob_backward(&self, features: &[f64], action: Action, trace: &mut Trace) -> Result<[f64; 2]> {
        let p = self.policy_forward(features, trace)?;
        let mut g = [-p[0], -p[1]];
        g[action.index()] += 1.0;
        self.net.backward(trace, &g);
        Ok(p)
    }

    /// Flat `grad_theta log pi(action | features)`.
    pub fn log_prob_gradient(&self, features: &[f64], action: Action) -> Result<Vec<f64>> {
        let mut t = self.net.new_trace();
        self.log_prob_backward(features, action, &mut t)?;
        Ok(self.net.flat_gradient(&t))
    }

    pub fn log_prob(&self, features: &[f64], action: Action) -> Result<f64> {
        let mut t = self.net.new_trace();
        self.net.forward(features, &mut t)?;
        let z = t.output();
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        Ok(z[action.index()] - lse)
    }
}

/// Bernoulli draw: transmit with probability `probs[1]`.
pub fn sample_action<R: Rng + ?Sized>(probs: [f64; 2], rng: &mut R) -> Action {
    if rng.random::<f64>() < probs[1] {
        Action::Transmit
    } else {
        Action::Wait
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Critic {
    /// Weights over the features with a trailing bias weight.
    Linear { weights: Vec<f64> },
    DeepLinear { net: Mlp },
}

impl Critic {
    /// Zero-initialised linear critic.
    pub fn linear(feature_dim: usize) -> Self {
        Critic::Linear {
            weights: vec![0.0; feature_dim + 1],
        }
    }

    /// Activation-free stack; the output layer starts at zero so `V = 0` initially.
    pub fn deep_linear<R: Rng + ?Sized>(shape: NetShape, rng: &mut R) -> Self {
        let mut net = Mlp::new(&shape.widths(1), Activation::Identity, rng);
        if let Some(last) = net.layers.last_mut() {
            last.weights.fill(0.0);
        }
        Critic::DeepLinear { net }
    }

    pub fn new<R: Rng + ?Sized>(kind: CriticKind, shape: NetShape, rng: &mut R) -> Self {
        match kind {
            CriticKind::Linear => Self::linear(shape.feature_dim),
            CriticKind::DeepLinear => Self::deep_linear(shape, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Critic::Linear { weights } => weights.len() - 1,
            Critic::DeepLinear { net } => net.input_dim(),
        }
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        Ok(())
    }

    pub fn value(&self, features: &[f64]) -> Result<f64> {
        self.check_dim(features)?;
        match self {
            Critic::Linear { weights } => {
                let (w, b) = weights.split_at(features.len());
                Ok(dot(w, features) + b[0])
            }
            Critic::DeepLinear { net } => {
                let mut t = net.new_trace();
                net.forward(features, &mut t)?;
                Ok(t.output()[0])
            }
        }
    }

    /// Flat `grad_w V(features)`.
    pub fn value_gradient(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        match self {
            Critic::Linear { .. } => {
                let mut g = features.to_vec();
                g.push(1.0);
                Ok(g)
            }
            Critic::DeepLinear { net } => {
                let mut t = net.new_trace();
                net.forward(features, &mut t)?;
                net.backward(&mut t, &[1.0]);
                Ok(net.flat_gradient(&t))
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Critic::Linear { weights } => weights.clone(),
            Critic::DeepLinear { net } => net.params(),
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        match self {
            Critic::Linear { weights } => {
                if params.len() != weights.len() {
                    return Err(Error::Dimension {
                        expected: weights.len(),
                        got: params.len(),
                    });
                }
                weights.copy_from_slice(params);
                Ok(())
            }
            Critic::DeepLinear { net } => net.set_params(params),
        }
    }

    /// `w += scale * grad_w V(features)`.
    fn step(&mut self, features: &[f64], scale: f64) -> Result<()> {
        self.check_dim(features)?;
        match self {
            Critic::Linear { weights } => {
                let (w, b) = weights.split_at_mut(features.len());
                for (wk, &x) in w.iter_mut().zip(features) {
                    *wk += scale * x;
                }
                b[0] += scale;
                if !b[0].is_finite() || !w.iter().sum::<f64>().is_finite() {
                    return Err(Error::NonFinite {
                        context: "critic update".into(),
                    });
                }
                Ok(())
            }
            Critic::DeepLinear { net } => {
                let mut t = net.new_trace();
                net.forward(features, &mut t)?;
                net.backward(&mut t, &[1.0]);
                net.apply_gradient(&t, scale)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdComputation {
    pub delta: f64,
    pub reward_used: f64,
    pub value_next: f64,
    pub value_prev: f64,
}

/// `delta = reward + gamma V(newest) - V(shifted)`.
pub fn td_error(critic: &Critic, reward: f64, newest: &[f64], shifted: &[f64], gamma: f64) -> Result<TdComputation> {
    let value_next = critic.value(newest)?;
    let value_prev = critic.value(shifted)?;
    Ok(TdComputation {
        delta: reward + gamma * value_next - value_prev,
        reward_used: reward,
        value_next,
        value_prev,
    })
}

pub fn critic_update(critic: &mut Critic, delta: f64, shifted: &[f64], beta: f64, sign: CriticSign) -> Result<()> {
    if delta == 0.0 {
        return Ok(());
    }
    critic.step(shifted, sign.factor() * beta * delta)
}

/// `theta += alpha * delta * grad log pi(action | shifted)`.
pub fn actor_update(
    actor: &mut Actor,
    delta: f64,
    shifted: &[f64],
    action: Action,
    alpha: f64,
    trace: &mut Trace,
) -> Result<()> {
    if delta == 0.0 {
        return Ok(());
    }
    actor.log_prob_backward(shifted, action, trace)?;
    actor.net.apply_gradient(trace, alpha * delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub rates: LearningRates,
    pub gamma: f64,
    pub shape: NetShape,
    pub critic_kind: CriticKind,
    pub critic_sign: CriticSign,
}

/// The decision a device made but has not learned from yet.
#[derive(Debug, Clone)]
pub struct Pending {
    pub obs: Observation,
    pub features: Vec<f64>,
    pub action: Action,
    pub reward: f64,
}

/// Actor, history and the un-learned decision of one device.
#[derive(Debug, Clone)]
pub struct ActingDevice {
    pub actor: Actor,
    pub history: HistoryBuffer,
    pub pending: Option<Pending>,
    /// Reward at the device's most recent decision.
    pub last_reward: f64,
    trace: Trace,
}

impl ActingDevice {
    pub fn new(actor: Actor, history: HistoryBuffer) -> Self {
        let trace = actor.net.new_trace();
        Self {
            actor,
            history,
            pending: None,
            last_reward: 0.0,
            trace,
        }
    }

    /// Episode boundary: history and pending decision are dropped.
    pub fn reset_episode(&mut self) {
        self.history.clear();
        self.pending = None;
        self.last_reward = 0.0;
    }

    /// Picks an action from the current observation and records it as pending.
    /// A newer decision replaces an older one that was never learned from.
    pub fn act<R: Rng + ?Sized>(&mut self, obs: Observation, reward: f64, rng: &mut R) -> Result<Action> {
        let features = self.history.features(&obs, Window::Newest);
        let probs = self.actor.policy_forward(&features, &mut self.trace)?;
        let action = sample_action(probs, rng);
        self.last_reward = reward;
        self.pending = Some(Pending {
            obs,
            features,
            action,
            reward,
        });
        Ok(action)
    }

    /// Shifted window and previous action, if a previous action exists.
    pub fn shifted(&self, current: &Observation) -> Option<(Vec<f64>, Action)> {
        let (_, prev) = self.history.newest()?;
        Some((self.history.features(current, Window::Shifted), prev))
    }

    pub fn actor_step(&mut self, delta: f64, shifted: &[f64], action: Action, alpha: f64) -> Result<()> {
        actor_update(&mut self.actor, delta, shifted, action, alpha, &mut self.trace)
    }

    /// Moves the pending decision into the history.
    pub fn commit(&mut self) -> Option<Pending> {
        let p = self.pending.take()?;
        self.history.push(&p.obs, p.action);
        Some(p)
    }
}

/// One device of the decentralized learner: acting state plus its own critic.
#[derive(Debug, Clone)]
pub struct DeviceLearner {
    pub device: ActingDevice,
    pub critic: Critic,
}

impl DeviceLearner {
    pub fn new<R: Rng + ?Sized>(n_devices: usize, history_len: usize, cfg: &LearnerConfig, rng: &mut R) -> Self {
        let actor = Actor::new(cfg.shape, rng);
        let critic = Critic::new(cfg.critic_kind, cfg.shape, rng);
        Self {
            device: ActingDevice::new(actor, HistoryBuffer::new(n_devices, history_len)),
            critic,
        }
    }

    /// Critic step, recomputed TD error, actor step, then history push.
    /// Returns the two TD computations when a previous action existed.
    pub fn learn(&mut self, reward: f64, cfg: &LearnerConfig) -> Result<Option<(TdComputation, TdComputation)>> {
        let Some(p) = self.device.pending.as_ref() else {
            return Ok(None);
        };
        let mut out = None;
        if let Some((shifted, prev)) = self.device.shifted(&p.obs) {
            let newest = &p.features;
            let td = td_error(&self.critic, reward, newest, &shifted, cfg.gamma)?;
            critic_update(&mut self.critic, td.delta, &shifted, cfg.rates.beta, cfg.critic_sign)?;
            let td2 = td_error(&self.critic, reward, newest, &shifted, cfg.gamma)?;
            self.device.actor_step(td2.delta, &shifted, prev, cfg.rates.alpha)?;
            out = Some((td, td2));
        }
        self.device.commit();
        Ok(out)
    }
}

/// Summary of one consensus learning step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub local_rewards: Vec<f64>,
    pub consensus_rewards: Vec<f64>,
    pub deltas: Vec<Option<f64>>,
}

/// Number of devices with an un-learned decision.
pub fn ready_count(learners: &[DeviceLearner]) -> usize {
    learners.iter().filter(|l| l.device.pending.is_some()).count()
}

/// Gossips the local rewards for `rounds` rounds, then lets every device
/// with a pending decision learn from its consensus reward. Devices without
/// a pending decision contribute the reward of their latest decision.
pub fn learner_step(
    learners: &mut [DeviceLearner],
    topology: &ConsensusTopology,
    rounds: usize,
    cfg: &LearnerConfig,
) -> Result<StepReport> {
    let local: Vec<f64> = learners
        .iter()
        .map(|l| l.device.pending.as_ref().map_or(l.device.last_reward, |p| p.reward))
        .collect();
    let consensus = topology.gossip(&local, rounds)?;
    let mut deltas = Vec::with_capacity(learners.len());
    for (learner, &r) in learners.iter_mut().zip(&consensus) {
        let td = learner.learn(r, cfg)?;
        deltas.push(td.map(|(_, second)| second.delta));
    }
    Ok(StepReport {
        local_rewards: local,
        consensus_rewards: consensus,
        deltas,
    })
}
