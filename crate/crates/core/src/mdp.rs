//! Multi-agent MDP view of the simulator.
//!
//! A device sees the scaled delay counters of every device and the channel
//! indicator, never the queues. Its reward is local and status based:
//! `r_i = -(w1 * w0 * l_i + w2 * q_i / q_max)`. Actor and critic inputs are
//! a window of the last `M` (observation, action) pairs followed by one
//! observation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Action, SimConfig, Simulator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpScaling {
    pub omega0: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub gamma: f64,
    pub r_max: f64,
}

impl MdpScaling {
    /// Scaling with `r_max` set to the worst case of one episode:
    /// `w1 * w0 * T + w2` (delay counters never exceed the horizon).
    pub fn new(omega0: f64, omega1: f64, omega2: f64, gamma: f64, horizon_slots: usize) -> Self {
        Self {
            omega0,
            omega1,
            omega2,
            gamma,
            r_max: omega1 * omega0 * horizon_slots as f64 + omega2,
        }
    }

    pub fn for_sim(sim: &SimConfig) -> Self {
        Self::new(1.0 / 60.0, 1.0, 1.0, 0.99, sim.horizon_slots)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("omega0", self.omega0), ("omega1", self.omega1), ("omega2", self.omega2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1]"));
        }
        if !self.r_max.is_finite() || self.r_max <= 0.0 {
            return Err(Error::config("r_max", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub own_delay: f64,
    /// Scaled delays of every other device in ascending id order.
    pub peer_delays: Vec<f64>,
    pub channel_busy: f64,
}

impl Observation {
    pub fn zeros(n_devices: usize) -> Self {
        Self {
            own_delay: 0.0,
            peer_delays: vec![0.0; n_devices.saturating_sub(1)],
            channel_busy: 0.0,
        }
    }

    /// `N + 1` for `N` devices.
    pub fn dim(&self) -> usize {
        self.peer_delays.len() + 2
    }

    pub fn write_to(&self, out: &mut [f64]) {
        out[0] = self.own_delay;
        out[1..=self.peer_delays.len()].copy_from_slice(&self.peer_delays);
        out[self.peer_delays.len() + 1] = self.channel_busy;
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.write_to(&mut v);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub norm_queues: Vec<f64>,
    pub norm_delays: Vec<f64>,
    pub channel_busy: f64,
}

impl GlobalState {
    pub fn capture(sim: &Simulator, scaling: &MdpScaling) -> Self {
        let q_max = sim.config().q_max as f64;
        Self {
            norm_queues: sim.devices().iter().map(|d| d.queue_len as f64 / q_max).collect(),
            norm_delays: sim
                .devices()
                .iter()
                .map(|d| scaling.omega0 * d.delay_counter as f64)
                .collect(),
            channel_busy: sim.channel().busy_indicator() as f64,
        }
    }
}

pub fn observe(device: usize, sim: &Simulator, scaling: &MdpScaling) -> Observation {
    let scaled = |l: usize| scaling.omega0 * l as f64;
    let devices = sim.devices();
    Observation {
        own_delay: scaled(devices[device].delay_counter),
        peer_delays: devices
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != device)
            .map(|(_, d)| scaled(d.delay_counter))
            .collect(),
        channel_busy: sim.channel().busy_indicator() as f64,
    }
}

/// Raw reward from a delay counter and a queue length.
pub fn reward_from(delay_counter: usize, queue_len: u32, q_max: u32, scaling: &MdpScaling) -> Result<f64> {
    let r = -(scaling.omega1 * scaling.omega0 * delay_counter as f64
        + scaling.omega2 * queue_len as f64 / q_max as f64);
    if r.abs() > scaling.r_max {
        return Err(Error::RewardBound {
            reward: r,
            r_max: scaling.r_max,
        });
    }
    Ok(r)
}

pub fn local_reward(device: usize, sim: &Simulator, scaling: &MdpScaling) -> Result<f64> {
    let d = sim.device(device);
    reward_from(d.delay_counter, d.queue_len, sim.config().q_max, scaling)
}

/// Which window of the history a feature vector covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Pairs `M..1` followed by the current observation.
    Newest,
    /// Pairs `M+1..2` followed by the observation stored with pair 1.
    Shifted,
}

/// Feature dimension `M (N + 2) + (N + 1)`.
pub fn feature_dim(n_devices: usize, history_len: usize) -> usize {
    history_len * (n_devices + 2) + n_devices + 1
}

#[derive(Debug, Clone)]
struct HistoryEntry {
    obs: Vec<f64>,
    action: Action,
}

/// Rolling window of the `M + 1` most recent (observation, action) pairs.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    entries: VecDeque<HistoryEntry>,
    history_len: usize,
    obs_dim: usize,
}

impl HistoryBuffer {
    pub fn new(n_devices: usize, history_len: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(history_len + 2),
            history_len,
            obs_dim: n_devices + 1,
        }
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn feature_dim(&self) -> usize {
        self.history_len * (self.obs_dim + 1) + self.obs_dim
    }

    /// Most recent pair (the action whose consequences the next update scores).
    pub fn newest(&self) -> Option<(&[f64], Action)> {
        self.entries.back().map(|e| (e.obs.as_slice(), e.action))
    }

    pub fn push(&mut self, obs: &Observation, action: Action) {
        self.push_raw(obs.to_vec(), action);
    }

    fn push_raw(&mut self, obs: Vec<f64>, action: Action) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        self.entries.push_back(HistoryEntry { obs, action });
        while self.entries.len() > self.history_len + 1 {
            self.entries.pop_front();
        }
    }

    /// Flat feature vector, oldest pair first, zero-padded while warming up.
    pub fn features(&self, current: &Observation, window: Window) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_dim()];
        self.write_features(current, window, &mut out);
        out
    }

    pub fn write_features(&self, current: &Observation, window: Window, out: &mut [f64]) {
        assert_eq!(out.len(), self.feature_dim());
        out.fill(0.0);
        let skip = match window {
            Window::Newest => 0,
            Window::Shifted => 1,
        };
        let pair = self.obs_dim + 1;
        let m = self.history_len;
        // Entry `k` back from the newest (k = skip + 1 ..= skip + m) lands in
        // slot `m - (k - skip)`, so the oldest pair comes first.
        for back in 1..=m {
            let idx = back + skip;
            if idx > self.entries.len() {
                break;
            }
            let e = &self.entries[self.entries.len() - idx];
            let slot = (m - back) * pair;
            out[slot..slot + self.obs_dim].copy_from_slice(&e.obs);
            out[slot + self.obs_dim] = e.action.as_f64();
        }
        let tail = &mut out[m * pair..];
        match window {
            Window::Newest => current.write_to(tail),
            Window::Shifted => {
                if let Some(e) = self.entries.back() {
                    tail.copy_from_slice(&e.obs);
                }
            }
        }
    }
}
