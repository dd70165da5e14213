//! Slot-accurate listen-before-talk random-access channel.
//!
//! Every slot the simulator ages each device's delay counter, draws Poisson
//! arrivals into the bounded queues and advances the shared channel. A slot
//! is a *decision epoch* when the channel has been idle for a whole DIFS,
//! and again every `recheck_slots` further idle slots (one by default, the
//! usual per-slot CSMA/CA countdown; setting it to DIFS makes a waiting
//! device sit out a fresh DIFS). All backlogged devices decide at the same
//! epoch; one transmitter succeeds, two or more collide.
//!
//! Timeline of a successful attempt decided at slot `t`:
//! data on `t+1 ..= t+D`, SIFS, then the ACK whose last slot is
//! `t+D+S+A`; at the end of that slot the packet leaves the queue and the
//! transmitter's delay counter resets to zero. A collision keeps the channel
//! busy for the same window but no ACK is sent and the packet stays queued.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_devices: usize,
    pub horizon_slots: usize,
    pub slot_us: f64,
    pub difs_slots: usize,
    pub sifs_slots: usize,
    pub data_slots: usize,
    pub ack_slots: usize,
    pub packet_bytes: usize,
    pub q_max: u32,
    /// Mean Poisson arrivals per device per slot.
    pub arrival_rate: f64,
    /// Idle slots between consecutive decision epochs once DIFS has elapsed.
    pub recheck_slots: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_devices: 4,
            horizon_slots: 600,
            slot_us: 9.0,
            difs_slots: 4,
            sifs_slots: 2,
            data_slots: 10,
            ack_slots: 4,
            packet_bytes: 1500,
            q_max: 10,
            arrival_rate: 1.0 / 30.0,
            recheck_slots: 1,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 {
            return Err(Error::config("n_devices", "must be at least 1"));
        }
        for (field, v) in [
            ("difs_slots", self.difs_slots),
            ("sifs_slots", self.sifs_slots),
            ("data_slots", self.data_slots),
            ("ack_slots", self.ack_slots),
            ("packet_bytes", self.packet_bytes),
            ("recheck_slots", self.recheck_slots),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.slot_us > 0.0 && self.slot_us.is_finite()) {
            return Err(Error::config("slot_us", "must be positive"));
        }
        if self.q_max == 0 {
            return Err(Error::config("q_max", "must be at least 1"));
        }
        if !(self.arrival_rate >= 0.0 && self.arrival_rate.is_finite()) {
            return Err(Error::config("arrival_rate", "must be a finite non-negative rate"));
        }
        Ok(())
    }

    /// Slots the channel stays busy after any transmission attempt.
    pub fn busy_slots(&self) -> usize {
        self.data_slots + self.sifs_slots + self.ack_slots
    }

    pub fn packet_bits(&self) -> f64 {
        (self.packet_bytes * 8) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Wait = 0,
    Transmit = 1,
}

impl Action {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Action::Wait
        } else {
            Action::Transmit
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceState {
    pub queue_len: u32,
    /// Slots since the last acknowledged transmission.
    pub delay_counter: usize,
    pub success_count: u64,
    pub transmit_flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelPhase {
    Idle,
    Data,
    Sifs,
    Ack,
    CollisionRecovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BusyKind {
    Success(usize),
    Collision,
}

#[derive(Debug, Clone)]
pub struct ChannelState {
    pub phase: ChannelPhase,
    /// Last slot of the current busy period (meaningless while idle).
    pub busy_until_slot: usize,
    pub active_transmitters: Vec<usize>,
    /// Consecutive idle slots since the channel was last released.
    pub idle_run: usize,
    busy_start: usize,
    kind: Option<BusyKind>,
}

impl ChannelState {
    fn idle() -> Self {
        Self {
            phase: ChannelPhase::Idle,
            busy_until_slot: 0,
            active_transmitters: Vec::new(),
            idle_run: 0,
            busy_start: 0,
            kind: None,
        }
    }

    /// Channel usage indicator `c`.
    pub fn busy_indicator(&self) -> u8 {
        u8::from(self.phase != ChannelPhase::Idle)
    }

    /// True once DIFS of idle time has elapsed and then every `recheck_slots`.
    pub fn at_epoch_boundary(&self, config: &SimConfig) -> bool {
        self.phase == ChannelPhase::Idle
            && self.idle_run >= config.difs_slots
            && (self.idle_run - config.difs_slots).is_multiple_of(config.recheck_slots)
    }
}

/// Whether `device` may decide in the current slot.
pub fn decision_epoch_ready(channel: &ChannelState, device: &DeviceState, config: &SimConfig) -> bool {
    device.queue_len > 0 && channel.at_epoch_boundary(config)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    NoTx,
    Success(usize),
    Collision(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessRecord {
    pub slot: usize,
    /// Delay counter value at the moment of the ACK.
    pub delay_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub horizon: usize,
    pub arrivals: Vec<u64>,
    pub pkt_t: Vec<u64>,
    /// Collision events (one per collided epoch, not per device).
    pub pkt_c: u64,
    /// Collisions each device took part in.
    pub device_collisions: Vec<u64>,
    pub pkt_l: Vec<u64>,
    /// Queue contents at the end, excluding a packet still awaiting its ACK.
    pub final_queue: Vec<u64>,
    pub in_flight: Vec<u64>,
    pub success_slots: Vec<Vec<SuccessRecord>>,
    /// Final delay counters, used for devices that never succeeded.
    pub final_delay: Vec<usize>,
    pub decision_epochs: u64,
    pub transmissions: Vec<u64>,
}

impl EpisodeMetrics {
    fn new(n: usize, horizon: usize) -> Self {
        Self {
            horizon,
            arrivals: vec![0; n],
            pkt_t: vec![0; n],
            pkt_c: 0,
            device_collisions: vec![0; n],
            pkt_l: vec![0; n],
            final_queue: vec![0; n],
            in_flight: vec![0; n],
            success_slots: vec![Vec::new(); n],
            final_delay: vec![0; n],
            decision_epochs: 0,
            transmissions: vec![0; n],
        }
    }

    pub fn n_devices(&self) -> usize {
        self.pkt_t.len()
    }

    pub fn total_pkt_t(&self) -> u64 {
        self.pkt_t.iter().sum()
    }

    pub fn total_pkt_l(&self) -> u64 {
        self.pkt_l.iter().sum()
    }

    /// Per-device packet conservation:
    /// `arrivals = pkt_t + pkt_l + final_queue + in_flight`.
    pub fn conservation_holds(&self) -> bool {
        (0..self.n_devices()).all(|i| {
            self.arrivals[i] == self.pkt_t[i] + self.pkt_l[i] + self.final_queue[i] + self.in_flight[i]
        })
    }
}

/// Poisson arrival count for one slot. A zero rate never produces arrivals.
pub fn arrivals_step<R: Rng + ?Sized>(poisson: Option<&Poisson<f64>>, rng: &mut R) -> u64 {
    match poisson {
        Some(p) => p.sample(rng) as u64,
        None => 0,
    }
}

fn poisson_for(rate: f64) -> Result<Option<Poisson<f64>>> {
    if rate == 0.0 {
        return Ok(None);
    }
    Poisson::new(rate)
        .map(Some)
        .map_err(|e| Error::config("arrival_rate", e.to_string()))
}

/// What happened in one slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotReport {
    pub slot: usize,
    /// Busy period that ended in this slot.
    pub completed: Option<Outcome>,
    /// Devices at a decision epoch in this slot (empty if none).
    pub ready: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    slot: usize,
    devices: Vec<DeviceState>,
    channel: ChannelState,
    arrival_rngs: Vec<ChaCha8Rng>,
    poisson: Option<Poisson<f64>>,
    metrics: EpisodeMetrics,
}

impl Simulator {
    /// Arrival streams derived from `config.seed`, one per device.
    pub fn new(config: SimConfig) -> Result<Self> {
        let seeds = (0..config.n_devices as u64)
            .map(|i| derive_seed(config.seed, i))
            .collect();
        Self::with_device_seeds(config, seeds)
    }

    /// Explicit per-device arrival seeds.
    pub fn with_device_seeds(config: SimConfig, seeds: Vec<u64>) -> Result<Self> {
        config.validate()?;
        if seeds.len() != config.n_devices {
            return Err(Error::Dimension {
                expected: config.n_devices,
                got: seeds.len(),
            });
        }
        let poisson = poisson_for(config.arrival_rate)?;
        let n = config.n_devices;
        Ok(Self {
            slot: 0,
            devices: vec![DeviceState::default(); n],
            channel: ChannelState::idle(),
            arrival_rngs: seeds.into_iter().map(rng_from).collect(),
            poisson,
            metrics: EpisodeMetrics::new(n, config.horizon_slots),
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Index of the most recently started slot (1-based; 0 before the first).
    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn device(&self, i: usize) -> &DeviceState {
        &self.devices[i]
    }

    pub fn channel(&self) -> &ChannelState {
        &self.channel
    }

    pub fn metrics(&self) -> &EpisodeMetrics {
        &self.metrics
    }

    pub fn is_finished(&self) -> bool {
        self.slot >= self.config.horizon_slots
    }

    pub fn decision_epoch_ready(&self, device: usize) -> bool {
        decision_epoch_ready(&self.channel, &self.devices[device], &self.config)
    }

    /// Overrides a queue length; for building test scenarios.
    pub fn set_queue(&mut self, device: usize, len: u32) {
        self.devices[device].queue_len = len.min(self.config.q_max);
    }

    /// Starts the next slot: ages delay counters, applies arrivals and
    /// progresses the channel, firing ACK side effects when a success window
    /// completes.
    pub fn advance_slot(&mut self) -> Result<SlotReport> {
        if self.is_finished() {
            return Err(Error::Invariant {
                slot: self.slot,
                reason: "advance past the horizon".into(),
            });
        }
        self.slot += 1;
        let slot = self.slot;
        for d in &mut self.devices {
            d.delay_counter += 1;
        }
        let q_max = self.config.q_max as u64;
        for (i, (d, rng)) in self.devices.iter_mut().zip(&mut self.arrival_rngs).enumerate() {
            let k = arrivals_step(self.poisson.as_ref(), rng);
            if k == 0 {
                continue;
            }
            let accepted = k.min(q_max - d.queue_len as u64);
            d.queue_len += accepted as u32;
            self.metrics.arrivals[i] += k;
            self.metrics.pkt_l[i] += k - accepted;
        }

        let mut completed = None;
        if self.channel.phase == ChannelPhase::Idle {
            self.channel.idle_run += 1;
        } else if slot == self.channel.busy_until_slot {
            completed = Some(self.release_channel(slot)?);
        } else {
            self.channel.phase = self.busy_phase(slot);
        }

        let ready = if self.channel.at_epoch_boundary(&self.config) {
            self.metrics.decision_epochs += 1;
            (0..self.devices.len())
                .filter(|&i| self.devices[i].queue_len > 0)
                .collect()
        } else {
            Vec::new()
        };
        Ok(SlotReport {
            slot,
            completed,
            ready,
        })
    }

    fn busy_phase(&self, slot: usize) -> ChannelPhase {
        let offset = slot - self.channel.busy_start;
        let c = &self.config;
        match self.channel.kind {
            Some(BusyKind::Success(_)) if offset < c.data_slots => ChannelPhase::Data,
            Some(BusyKind::Success(_)) if offset < c.data_slots + c.sifs_slots => ChannelPhase::Sifs,
            Some(BusyKind::Success(_)) => ChannelPhase::Ack,
            _ if offset < c.data_slots => ChannelPhase::Data,
            _ => ChannelPhase::CollisionRecovery,
        }
    }

    fn release_channel(&mut self, slot: usize) -> Result<Outcome> {
        let outcome = match self.channel.kind {
            Some(BusyKind::Success(i)) => {
                let d = &mut self.devices[i];
                if d.queue_len == 0 {
                    return Err(Error::Invariant {
                        slot,
                        reason: format!("ACK for device {i} with an empty queue"),
                    });
                }
                d.queue_len -= 1;
                d.success_count += 1;
                self.metrics.pkt_t[i] += 1;
                self.metrics.success_slots[i].push(SuccessRecord {
                    slot,
                    delay_slots: d.delay_counter,
                });
                d.delay_counter = 0;
                Outcome::Success(i)
            }
            Some(BusyKind::Collision) => Outcome::Collision(self.channel.active_transmitters.clone()),
            None => {
                return Err(Error::Invariant {
                    slot,
                    reason: "busy channel without a transmission".into(),
                })
            }
        };
        for &i in &self.channel.active_transmitters {
            self.devices[i].transmit_flag = false;
        }
        self.channel = ChannelState::idle();
        Ok(outcome)
    }

    /// Resolves the transmit decisions taken at the current decision epoch.
    pub fn resolve_transmissions(&mut self, transmitting: &[usize]) -> Result<Outcome> {
        if transmitting.is_empty() {
            return Ok(Outcome::NoTx);
        }
        let slot = self.slot;
        if !self.channel.at_epoch_boundary(&self.config) {
            return Err(Error::Invariant {
                slot,
                reason: "transmission outside a decision epoch".into(),
            });
        }
        let mut set = transmitting.to_vec();
        set.sort_unstable();
        set.dedup();
        for &i in &set {
            if i >= self.devices.len() || self.devices[i].queue_len == 0 {
                return Err(Error::Invariant {
                    slot,
                    reason: format!("device {i} transmits with an empty queue"),
                });
            }
        }
        for &i in &set {
            self.devices[i].transmit_flag = true;
            self.metrics.transmissions[i] += 1;
        }
        let (kind, outcome) = if set.len() == 1 {
            (BusyKind::Success(set[0]), Outcome::Success(set[0]))
        } else {
            self.metrics.pkt_c += 1;
            for &i in &set {
                self.metrics.device_collisions[i] += 1;
            }
            (BusyKind::Collision, Outcome::Collision(set.clone()))
        };
        self.channel = ChannelState {
            phase: ChannelPhase::Data,
            busy_until_slot: slot + self.config.busy_slots(),
            active_transmitters: set,
            idle_run: 0,
            busy_start: slot + 1,
            kind: Some(kind),
        };
        Ok(outcome)
    }

    /// Freezes the episode counters.
    pub fn finish(mut self) -> EpisodeMetrics {
        let in_flight = match self.channel.kind {
            Some(BusyKind::Success(i)) => Some(i),
            _ => None,
        };
        for (i, d) in self.devices.iter().enumerate() {
            let flying = u64::from(in_flight == Some(i));
            self.metrics.in_flight[i] = flying;
            self.metrics.final_queue[i] = d.queue_len as u64 - flying;
            self.metrics.final_delay[i] = d.delay_counter;
        }
        self.metrics
    }
}

/// Total network throughput in Mbps.
pub fn throughput_mbps(metrics: &EpisodeMetrics, config: &SimConfig) -> Result<f64> {
    if metrics.horizon == 0 {
        return Err(Error::config("horizon_slots", "throughput undefined for an empty episode"));
    }
    let bits = metrics.total_pkt_t() as f64 * config.packet_bits();
    Ok(bits / (metrics.horizon as f64 * config.slot_us))
}

pub fn device_throughput_mbps(metrics: &EpisodeMetrics, config: &SimConfig) -> Result<Vec<f64>> {
    if metrics.horizon == 0 {
        return Err(Error::config("horizon_slots", "throughput undefined for an empty episode"));
    }
    let span = metrics.horizon as f64 * config.slot_us;
    Ok(metrics
        .pkt_t
        .iter()
        .map(|&v| v as f64 * config.packet_bits() / span)
        .collect())
}

/// Mean delay over all successes of the episode, in ms; `None` without successes.
pub fn mean_delay_ms(metrics: &EpisodeMetrics, config: &SimConfig) -> Option<f64> {
    let (sum, count) = metrics
        .success_slots
        .iter()
        .flatten()
        .fold((0usize, 0usize), |(s, c), r| (s + r.delay_slots, c + 1));
    (count > 0).then(|| sum as f64 / count as f64 * config.slot_us / 1000.0)
}

/// Per-device mean delay in ms; `None` for a device without successes.
pub fn device_delay_ms(metrics: &EpisodeMetrics, config: &SimConfig) -> Vec<Option<f64>> {
    metrics
        .success_slots
        .iter()
        .map(|recs| {
            (!recs.is_empty()).then(|| {
                let s: usize = recs.iter().map(|r| r.delay_slots).sum();
                s as f64 / recs.len() as f64 * config.slot_us / 1000.0
            })
        })
        .collect()
}

/// Per-device delay for fairness: a device that never succeeded is charged
/// its final delay counter (slots waited without any ACK).
pub fn device_delay_ms_censored(metrics: &EpisodeMetrics, config: &SimConfig) -> Vec<f64> {
    device_delay_ms(metrics, config)
        .into_iter()
        .zip(&metrics.final_delay)
        .map(|(d, &l)| d.unwrap_or(l as f64 * config.slot_us / 1000.0))
        .collect()
}

/// Average of the per-device delays (censored as above), the figure reported
/// as the network delay. Unlike [`mean_delay_ms`] it weighs every device
/// equally, so a device that rarely gets through is not drowned out by one
/// that transmits often. `None` when nothing was delivered.
pub fn device_average_delay_ms(metrics: &EpisodeMetrics, config: &SimConfig) -> Option<f64> {
    if metrics.total_pkt_t() == 0 {
        return None;
    }
    let d = device_delay_ms_censored(metrics, config);
    Some(d.iter().sum::<f64>() / d.len() as f64)
}

/// Normalized gap `(max - min) / max`.
pub fn n_gap(values: &[f64]) -> Result<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if values.is_empty() || max <= 0.0 || !max.is_finite() || !min.is_finite() {
        return Err(Error::NonFinite {
            context: "n_gap needs a positive maximum".into(),
        });
    }
    Ok((max - min) / max)
}
