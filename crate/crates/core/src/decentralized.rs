//! The consensus-based fully decentralized controller.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::consensus::ConsensusTopology;
use crate::episode::Controller;
use crate::error::{Error, Result};
use crate::learn::{learner_step, ready_count, DeviceLearner, LearnerConfig};
use crate::mdp::{local_reward, observe, MdpScaling};
use crate::sim::{Action, Simulator};

#[derive(Debug, Clone)]
pub struct Decentralized {
    pub learners: Vec<DeviceLearner>,
    pub topology: ConsensusTopology,
    pub cfg: LearnerConfig,
    pub scaling: MdpScaling,
    /// Devices that must have acted before a learning step (all by default).
    pub quorum: usize,
    pub learning: bool,
    pub td_stats: TdStats,
    updates: u64,
}

/// Running TD-error statistics, for monitoring a training run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TdStats {
    pub count: u64,
    pub sum: f64,
    pub abs_sum: f64,
}

impl TdStats {
    pub fn record(&mut self, delta: f64) {
        self.count += 1;
        self.sum += delta;
        self.abs_sum += delta.abs();
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count.max(1) as f64
    }

    pub fn mean_abs(&self) -> f64 {
        self.abs_sum / self.count.max(1) as f64
    }
}

impl Decentralized {
    pub fn new<R: Rng + ?Sized>(
        topology: ConsensusTopology,
        history_len: usize,
        cfg: LearnerConfig,
        scaling: MdpScaling,
        rng: &mut R,
    ) -> Self {
        let n = topology.n_devices();
        let learners = (0..n).map(|_| DeviceLearner::new(n, history_len, &cfg, rng)).collect();
        Self {
            learners,
            topology,
            cfg,
            scaling,
            quorum: n,
            learning: true,
            td_stats: TdStats::default(),
            updates: 0,
        }
    }

    pub fn with_quorum(mut self, quorum: usize) -> Result<Self> {
        if quorum == 0 || quorum > self.learners.len() {
            return Err(Error::config(
                "update_quorum",
                format!("must lie in 1..={}", self.learners.len()),
            ));
        }
        self.quorum = quorum;
        Ok(self)
    }

    pub fn n_devices(&self) -> usize {
        self.learners.len()
    }
}

impl Controller for Decentralized {
    fn begin_episode(&mut self, _sim: &Simulator) -> Result<()> {
        for l in &mut self.learners {
            l.device.reset_episode();
        }
        Ok(())
    }

    fn decide(&mut self, device: usize, sim: &Simulator, rng: &mut ChaCha8Rng) -> Result<Action> {
        let obs = observe(device, sim, &self.scaling);
        let reward = local_reward(device, sim, &self.scaling)?;
        self.learners[device].device.act(obs, reward, rng)
    }

    fn end_slot(&mut self, _sim: &Simulator) -> Result<()> {
        if ready_count(&self.learners) < self.quorum {
            return Ok(());
        }
        if !self.learning {
            // Frozen policies keep building history under the training-time rule.
            for l in &mut self.learners {
                l.device.commit();
            }
            return Ok(());
        }
        let report = learner_step(&mut self.learners, &self.topology, self.topology.rounds(), &self.cfg)?;
        for d in report.deltas.into_iter().flatten() {
            self.td_stats.record(d);
        }
        self.updates += 1;
        Ok(())
    }

    fn updates(&self) -> u64 {
        self.updates
    }
}
