//! Comparison protocols: fixed transmission probability, fixed and binary
//! exponential backoff contention windows, and a CTDE actor-critic with a
//! central critic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::Controller;
use crate::error::{Error, Result};
use crate::learn::{critic_update, td_error, ActingDevice, Actor, Critic, CriticKind, LearnerConfig, NetShape};
use crate::mdp::{local_reward, observe, HistoryBuffer, MdpScaling};
use crate::sim::{Action, Outcome, Simulator};

/// Transmit with a fixed probability at every decision epoch.
#[derive(Debug, Clone)]
pub struct FixedProbability {
    pub tx_prob: f64,
}

impl FixedProbability {
    pub fn new(tx_prob: f64) -> Result<Self> {
        if !(tx_prob > 0.0 && tx_prob <= 1.0) {
            return Err(Error::config("tx_prob", "must lie in (0, 1]"));
        }
        Ok(Self { tx_prob })
    }
}

pub fn ra_p_decide<R: Rng + ?Sized>(rng: &mut R, tx_prob: f64) -> Action {
    if rng.random::<f64>() < tx_prob {
        Action::Transmit
    } else {
        Action::Wait
    }
}

impl Controller for FixedProbability {
    fn decide(&mut self, _device: usize, _sim: &Simulator, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(ra_p_decide(rng, self.tx_prob))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackoffMode {
    Fixed,
    /// Binary exponential backoff.
    Beb,
}

/// Per-device contention window state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackoffState {
    /// Remaining idle epochs before transmitting; `None` until drawn.
    pub counter: Option<u32>,
    pub window: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackoffParams {
    pub mode: BackoffMode,
    pub initial_window: u32,
    pub window_cap: u32,
    /// Shrink the window back to `initial_window` after a success (BEB only).
    pub reset_on_success: bool,
    /// Keep residual counters across busy periods instead of redrawing.
    pub freeze: bool,
}

impl BackoffParams {
    pub fn fixed(window: u32) -> Self {
        Self {
            mode: BackoffMode::Fixed,
            initial_window: window,
            window_cap: window,
            reset_on_success: false,
            freeze: false,
        }
    }

    /// Doubling on collision only; windows persist across successes.
    pub fn beb(initial_window: u32, window_cap: u32) -> Self {
        Self {
            mode: BackoffMode::Beb,
            initial_window,
            window_cap,
            reset_on_success: false,
            freeze: false,
        }
    }

    pub fn with_reset(mut self, reset_on_success: bool) -> Self {
        self.reset_on_success = reset_on_success;
        self
    }

    pub fn with_freeze(mut self, freeze: bool) -> Self {
        self.freeze = freeze;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_window == 0 {
            return Err(Error::config("w_cw", "window must be at least 1"));
        }
        if self.window_cap < self.initial_window {
            return Err(Error::config("w_cw_cap", "cap must be at least the initial window"));
        }
        Ok(())
    }
}

impl BackoffState {
    pub fn new(params: &BackoffParams) -> Self {
        Self {
            counter: None,
            window: params.initial_window,
        }
    }

    /// Draws a counter if none is active, then transmits at zero or counts
    /// down one idle epoch.
    pub fn decide<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Action {
        let c = *self.counter.get_or_insert_with(|| rng.random_range(0..self.window));
        if c == 0 {
            self.counter = None;
            Action::Transmit
        } else {
            self.counter = Some(c - 1);
            Action::Wait
        }
    }

    pub fn on_success(&mut self, params: &BackoffParams) {
        if params.mode == BackoffMode::Beb && params.reset_on_success {
            self.window = params.initial_window;
        }
    }

    pub fn on_collision(&mut self, params: &BackoffParams) {
        if params.mode == BackoffMode::Beb {
            self.window = (self.window.saturating_mul(2)).min(params.window_cap);
        }
    }
}

/// RA-FCW / RA-ACW controller.
#[derive(Debug, Clone)]
pub struct Backoff {
    pub params: BackoffParams,
    pub states: Vec<BackoffState>,
}

impl Backoff {
    pub fn new(params: BackoffParams, n_devices: usize) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            states: vec![BackoffState::new(&params); n_devices],
            params,
        })
    }
}

impl Controller for Backoff {
    fn begin_episode(&mut self, _sim: &Simulator) -> Result<()> {
        self.states.fill(BackoffState::new(&self.params));
        Ok(())
    }

    fn decide(&mut self, device: usize, _sim: &Simulator, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(self.states[device].decide(rng))
    }

    /// Every contention round starts from fresh draws unless counters freeze
    /// across busy periods.
    fn on_outcome(&mut self, outcome: &Outcome) {
        if !self.params.freeze && *outcome != Outcome::NoTx {
            for s in &mut self.states {
                s.counter = None;
            }
        }
        match outcome {
            Outcome::NoTx => {}
            Outcome::Success(i) => self.states[*i].on_success(&self.params),
            Outcome::Collision(set) => {
                for &i in set {
                    self.states[i].on_collision(&self.params);
                }
            }
        }
    }
}

/// Centralized training, decentralized execution: local actors, one critic
/// over the concatenated features of every device trained on the exact
/// global mean reward.
#[derive(Debug, Clone)]
pub struct Ctde {
    pub devices: Vec<ActingDevice>,
    pub central_critic: Critic,
    pub cfg: LearnerConfig,
    pub scaling: MdpScaling,
    pub learning: bool,
    updates: u64,
}

impl Ctde {
    /// `width_scale` multiplies the hidden width of a deep-linear central critic.
    pub fn new<R: Rng + ?Sized>(
        n_devices: usize,
        history_len: usize,
        cfg: LearnerConfig,
        scaling: MdpScaling,
        width_scale: f64,
        rng: &mut R,
    ) -> Self {
        let devices = (0..n_devices)
            .map(|_| ActingDevice::new(Actor::new(cfg.shape, rng), HistoryBuffer::new(n_devices, history_len)))
            .collect();
        let central_shape = NetShape {
            feature_dim: n_devices * cfg.shape.feature_dim,
            hidden_width: ((cfg.shape.hidden_width as f64 * width_scale).round() as usize).max(1),
            hidden_layers: cfg.shape.hidden_layers,
        };
        let central_critic = match cfg.critic_kind {
            CriticKind::Linear => Critic::linear(central_shape.feature_dim),
            CriticKind::DeepLinear => Critic::deep_linear(central_shape, rng),
        };
        Self {
            devices,
            central_critic,
            cfg,
            scaling,
            learning: true,
            updates: 0,
        }
    }

    pub fn central_input_dim(&self) -> usize {
        self.central_critic.input_dim()
    }

    /// One centralized step over the pending decisions of all devices.
    pub fn ctde_train_step(&mut self) -> Result<Option<f64>> {
        if self.devices.iter().any(|d| d.pending.is_none()) {
            return Err(Error::Invariant {
                slot: 0,
                reason: "central update before every device acted".into(),
            });
        }
        let n = self.devices.len();
        let reward = self
            .devices
            .iter()
            .map(|d| d.pending.as_ref().map_or(0.0, |p| p.reward))
            .sum::<f64>()
            / n as f64;
        let dim = self.cfg.shape.feature_dim;
        let mut newest = Vec::with_capacity(n * dim);
        let mut shifted = Vec::with_capacity(n * dim);
        let mut prev = Vec::with_capacity(n);
        for d in &self.devices {
            let p = d.pending.as_ref().expect("checked above");
            newest.extend_from_slice(&p.features);
            match d.shifted(&p.obs) {
                Some((s, a)) => {
                    shifted.extend_from_slice(&s);
                    prev.push(a);
                }
                None => shifted.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
        if newest.len() != self.central_critic.input_dim() {
            return Err(Error::Dimension {
                expected: self.central_critic.input_dim(),
                got: newest.len(),
            });
        }
        let mut delta_used = None;
        if prev.len() == n {
            let td = td_error(&self.central_critic, reward, &newest, &shifted, self.cfg.gamma)?;
            critic_update(
                &mut self.central_critic,
                td.delta,
                &shifted,
                self.cfg.rates.beta,
                self.cfg.critic_sign,
            )?;
            let delta = td_error(&self.central_critic, reward, &newest, &shifted, self.cfg.gamma)?.delta;
            for (i, d) in self.devices.iter_mut().enumerate() {
                let own = &shifted[i * dim..(i + 1) * dim];
                d.actor_step(delta, own, prev[i], self.cfg.rates.alpha)?;
            }
            delta_used = Some(delta);
        }
        for d in &mut self.devices {
            d.commit();
        }
        self.updates += 1;
        Ok(delta_used)
    }
}

impl Controller for Ctde {
    fn begin_episode(&mut self, _sim: &Simulator) -> Result<()> {
        for d in &mut self.devices {
            d.reset_episode();
        }
        Ok(())
    }

    fn decide(&mut self, device: usize, sim: &Simulator, rng: &mut ChaCha8Rng) -> Result<Action> {
        let obs = observe(device, sim, &self.scaling);
        let reward = local_reward(device, sim, &self.scaling)?;
        self.devices[device].act(obs, reward, rng)
    }

    fn end_slot(&mut self, _sim: &Simulator) -> Result<()> {
        if !self.devices.iter().all(|d| d.pending.is_some()) {
            return Ok(());
        }
        if self.learning {
            self.ctde_train_step()?;
        } else {
            for d in &mut self.devices {
                d.commit();
            }
        }
        Ok(())
    }

    fn updates(&self) -> u64 {
        self.updates
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn certain_transmission() {
        let mut rng = rng_from(0);
        assert!((0..100).all(|_| ra_p_decide(&mut rng, 1.0) == Action::Transmit));
        assert!(FixedProbability::new(0.0).is_err());
        assert!(FixedProbability::new(1.2).is_err());
    }

    #[test]
    fn quarter_probability_rate() {
        let mut rng = rng_from(17);
        let n = 100_000;
        let k = (0..n).filter(|_| ra_p_decide(&mut rng, 0.25) == Action::Transmit).count();
        assert!((k as f64 / n as f64 - 0.25).abs() < 0.005);
    }

    #[test]
    fn unit_window_transmits_immediately() {
        let p = BackoffParams::fixed(1);
        let mut s = BackoffState::new(&p);
        let mut rng = rng_from(1);
        for _ in 0..50 {
            assert_eq!(s.decide(&mut rng), Action::Transmit);
            s.on_collision(&p);
        }
    }

    #[test]
    fn beb_doubles_and_caps() {
        let p = BackoffParams::beb(1, 1024);
        let mut s = BackoffState::new(&p);
        s.on_collision(&p);
        s.on_collision(&p);
        assert_eq!(s.window, 4);
        s.on_success(&p);
        assert_eq!(s.window, 4);
        for _ in 0..20 {
            s.on_collision(&p);
        }
        assert_eq!(s.window, 1024);
    }

    #[test]
    fn beb_reset_variant() {
        let p = BackoffParams::beb(1, 1024).with_reset(true);
        let mut s = BackoffState::new(&p);
        s.on_collision(&p);
        s.on_collision(&p);
        s.on_success(&p);
        assert_eq!(s.window, 1);
    }

    #[test]
    fn countdown_reaches_transmission() {
        let p = BackoffParams::fixed(16);
        let mut s = BackoffState::new(&p);
        let mut rng = rng_from(4);
        let mut waits = 0;
        while s.decide(&mut rng) == Action::Wait {
            waits += 1;
        }
        assert!(waits < 16);
        assert_eq!(s.counter, None);
    }

    #[test]
    fn fixed_window_draws_are_uniform() {
        // Chi-square with 15 degrees of freedom; the 1% critical value is 30.578.
        let p = BackoffParams::fixed(16);
        let mut rng = rng_from(23);
        let n = 100_000;
        let mut counts = [0u64; 16];
        for _ in 0..n {
            let mut s = BackoffState::new(&p);
            s.decide(&mut rng);
            let drawn = s.counter.map_or(0, |c| c + 1);
            counts[drawn as usize] += 1;
        }
        let expected = n as f64 / 16.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 30.578, "chi2 = {chi2}");
    }
}
