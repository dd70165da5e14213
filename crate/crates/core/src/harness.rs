//! Experiment campaigns: configuration, seeded multi-run execution,
//! aggregation into the performance and fairness tables, CSV/JSON outputs,
//! checkpoints and the communication overhead comparison.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::baselines::{Backoff, BackoffParams, Ctde, FixedProbability};
use crate::consensus::{consensus_matrix, ConsensusTopology, Graph, RoundsSpec, TopologyConfig, WeightRule};
use crate::decentralized::Decentralized;
use crate::episode::{run_episode, Controller};
use crate::error::{Error, Result};
use crate::learn::{Actor, Critic, CriticKind, CriticSign, LearnerConfig, LearningRates, NetShape};
use crate::mdp::{feature_dim, MdpScaling};
use crate::seed::{derive_seed, device_rngs, rng_from};
use crate::sim::{
    device_average_delay_ms, device_delay_ms_censored, device_throughput_mbps, mean_delay_ms, n_gap, throughput_mbps, EpisodeMetrics,
    SimConfig, Simulator,
};

pub const EPISODES_CSV: &str = "episodes.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TIMESERIES_CSV: &str = "timeseries.csv";
pub const EPISODES_SCHEMA: &str = "# ra-marl episodes v1";
pub const TIMESERIES_SCHEMA: &str = "# ra-marl timeseries v1";
pub const EPISODES_HEADER: &str = "run,episode,algo,tput_mbps,delay_ms,collisions,pkt_t,pkt_l,ngap_tput,ngap_delay";
pub const TIMESERIES_HEADER: &str =
    "episode,algo,runs,tput_mbps,delay_ms,collisions,tput_min,tput_max,tput_gap,delay_min,delay_max,delay_gap";

const STREAM_INIT: u64 = 1;
const STREAM_ARRIVALS: u64 = 2;
const STREAM_DECISIONS: u64 = 3;
const STREAM_EVAL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "proposed")]
    Proposed,
    #[serde(rename = "ra_p")]
    RaP,
    #[serde(rename = "ra_fcw")]
    RaFcw,
    #[serde(rename = "ra_acw")]
    RaAcw,
    #[serde(rename = "ra_ctde")]
    RaCtde,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::RaP,
        Algorithm::RaAcw,
        Algorithm::RaFcw,
        Algorithm::RaCtde,
        Algorithm::Proposed,
    ];

    pub fn is_learning(self) -> bool {
        matches!(self, Algorithm::Proposed | Algorithm::RaCtde)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Proposed => "Proposed",
            Algorithm::RaP => "RA-P",
            Algorithm::RaFcw => "RA-FCW",
            Algorithm::RaAcw => "RA-ACW",
            Algorithm::RaCtde => "RA-CTDE",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "proposed" | "decentralized" => Ok(Algorithm::Proposed),
            "ra_p" => Ok(Algorithm::RaP),
            "ra_fcw" => Ok(Algorithm::RaFcw),
            "ra_acw" => Ok(Algorithm::RaAcw),
            "ra_ctde" | "ctde" => Ok(Algorithm::RaCtde),
            _ => Err(Error::config("algorithm", format!("unknown algorithm {s:?}"))),
        }
    }
}

/// Flat key-value experiment configuration. Defaults reproduce the
/// desk-scale setting: 4 devices, 600-slot episodes, 1200 episodes, 20 runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    // Channel and traffic.
    pub n_devices: usize,
    pub horizon_slots: usize,
    pub slot_us: f64,
    pub difs_slots: usize,
    pub sifs_slots: usize,
    pub data_slots: usize,
    pub ack_slots: usize,
    pub packet_bytes: usize,
    pub q_max: u32,
    pub arrival_rate: f64,
    pub recheck_slots: usize,

    // MDP.
    pub omega0: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub gamma: f64,
    pub history_len: usize,

    // Communication graph and consensus.
    pub neighbors_per_side: usize,
    pub rewire_prob: f64,
    pub topology_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consensus_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consensus_rounds: Option<usize>,
    pub weight_rule: WeightRule,

    // Learners.
    pub alpha: f64,
    pub beta: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub critic: CriticKind,
    pub critic_sign: CriticSign,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_quorum: Option<usize>,

    // Baselines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tx_prob: Option<f64>,
    pub w_cw_fixed: u32,
    pub w_cw_initial: u32,
    pub w_cw_cap: u32,
    pub w_cw_reset: bool,
    pub w_cw_freeze: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub central_critic_width_scale: Option<f64>,

    // Campaign.
    pub algorithm: Algorithm,
    pub episodes: usize,
    pub runs: usize,
    pub seed: u64,
    /// Trailing episodes averaged into the summary tables.
    pub summary_window: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            n_devices: sim.n_devices,
            horizon_slots: sim.horizon_slots,
            slot_us: sim.slot_us,
            difs_slots: sim.difs_slots,
            sifs_slots: sim.sifs_slots,
            data_slots: sim.data_slots,
            ack_slots: sim.ack_slots,
            packet_bytes: sim.packet_bytes,
            q_max: sim.q_max,
            arrival_rate: sim.arrival_rate,
            recheck_slots: sim.recheck_slots,
            omega0: 1.0 / 60.0,
            omega1: 1.0,
            omega2: 1.0,
            gamma: 0.99,
            history_len: 4,
            neighbors_per_side: 1,
            rewire_prob: 0.0,
            topology_seed: 0,
            consensus_eps: None,
            consensus_rounds: Some(3),
            weight_rule: WeightRule::EqualNeighbor,
            alpha: 0.006,
            beta: 0.003,
            hidden_width: 128,
            hidden_layers: 4,
            critic: CriticKind::Linear,
            critic_sign: CriticSign::SemiGradient,
            update_quorum: None,
            tx_prob: None,
            w_cw_fixed: 16,
            w_cw_initial: 1,
            w_cw_cap: 1024,
            w_cw_reset: false,
            w_cw_freeze: false,
            central_critic_width_scale: None,
            algorithm: Algorithm::Proposed,
            episodes: 1200,
            runs: 20,
            seed: 0,
            summary_window: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            n_devices: self.n_devices,
            horizon_slots: self.horizon_slots,
            slot_us: self.slot_us,
            difs_slots: self.difs_slots,
            sifs_slots: self.sifs_slots,
            data_slots: self.data_slots,
            ack_slots: self.ack_slots,
            packet_bytes: self.packet_bytes,
            q_max: self.q_max,
            arrival_rate: self.arrival_rate,
            recheck_slots: self.recheck_slots,
            seed,
        }
    }

    pub fn scaling(&self) -> MdpScaling {
        MdpScaling::new(self.omega0, self.omega1, self.omega2, self.gamma, self.horizon_slots)
    }

    pub fn rounds_spec(&self) -> RoundsSpec {
        match (self.consensus_rounds, self.consensus_eps) {
            (Some(g), _) => RoundsSpec::Fixed(g),
            (None, Some(eps)) => RoundsSpec::Accuracy(eps),
            (None, None) => RoundsSpec::Accuracy(0.005),
        }
    }

    pub fn topology_config(&self) -> TopologyConfig {
        TopologyConfig {
            n: self.n_devices,
            neighbors_per_side: self.neighbors_per_side,
            rewire_prob: self.rewire_prob,
            seed: self.topology_seed,
            rounds: self.rounds_spec(),
            weight_rule: self.weight_rule,
        }
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.n_devices, self.history_len)
    }

    pub fn net_shape(&self) -> NetShape {
        NetShape {
            feature_dim: self.feature_dim(),
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            rates: LearningRates {
                alpha: self.alpha,
                beta: self.beta,
            },
            gamma: self.gamma,
            shape: self.net_shape(),
            critic_kind: self.critic,
            critic_sign: self.critic_sign,
        }
    }

    pub fn tx_prob(&self) -> f64 {
        self.tx_prob.unwrap_or(1.0 / self.n_devices as f64)
    }

    pub fn central_width_scale(&self) -> f64 {
        self.central_critic_width_scale.unwrap_or(self.n_devices as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim_config(0).validate()?;
        self.scaling().validate()?;
        self.learner_config().rates.validate()?;
        if self.history_len == 0 {
            return Err(Error::config("history_len", "must be at least 1"));
        }
        if self.hidden_width == 0 {
            return Err(Error::config("hidden_width", "must be at least 1"));
        }
        if self.episodes == 0 {
            return Err(Error::config("episodes", "must be at least 1"));
        }
        if self.runs == 0 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        if self.summary_window == 0 {
            return Err(Error::config("summary_window", "must be at least 1"));
        }
        if let Some(eps) = self.consensus_eps {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(Error::config("consensus_eps", "must lie in (0, 1]"));
            }
        }
        if let Some(q) = self.update_quorum {
            if q == 0 || q > self.n_devices {
                return Err(Error::config("update_quorum", format!("must lie in 1..={}", self.n_devices)));
            }
        }
        if let Some(p) = self.tx_prob {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config("tx_prob", "must lie in (0, 1]"));
            }
        }
        if self.w_cw_fixed == 0 {
            return Err(Error::config("w_cw_fixed", "must be at least 1"));
        }
        if self.w_cw_initial == 0 {
            return Err(Error::config("w_cw_initial", "must be at least 1"));
        }
        if self.w_cw_cap < self.w_cw_initial {
            return Err(Error::config("w_cw_cap", "must be at least w_cw_initial"));
        }
        if let Some(s) = self.central_critic_width_scale {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::config("central_critic_width_scale", "must be positive"));
            }
        }
        // Learning algorithms need a valid consensus topology; checked here
        // so a bad graph fails before any run starts.
        if self.algorithm == Algorithm::Proposed {
            ConsensusTopology::build(&self.topology_config())?;
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, run as u64)
    }
}

/// A controller for any of the five algorithms.
pub enum AnyController {
    Proposed(Decentralized),
    RaP(FixedProbability),
    Backoff(Backoff),
    Ctde(Ctde),
}

impl AnyController {
    pub fn build(cfg: &ExperimentConfig, run_seed: u64) -> Result<Self> {
        let mut rng = rng_from(derive_seed(run_seed, STREAM_INIT));
        let n = cfg.n_devices;
        Ok(match cfg.algorithm {
            Algorithm::Proposed => {
                let topo = ConsensusTopology::build(&cfg.topology_config())?;
                let mut c = Decentralized::new(topo, cfg.history_len, cfg.learner_config(), cfg.scaling(), &mut rng);
                if let Some(q) = cfg.update_quorum {
                    c = c.with_quorum(q)?;
                }
                AnyController::Proposed(c)
            }
            Algorithm::RaP => AnyController::RaP(FixedProbability::new(cfg.tx_prob())?),
            Algorithm::RaFcw => AnyController::Backoff(Backoff::new(
                BackoffParams::fixed(cfg.w_cw_fixed).with_freeze(cfg.w_cw_freeze),
                n,
            )?),
            Algorithm::RaAcw => AnyController::Backoff(Backoff::new(
                BackoffParams::beb(cfg.w_cw_initial, cfg.w_cw_cap)
                    .with_reset(cfg.w_cw_reset)
                    .with_freeze(cfg.w_cw_freeze),
                n,
            )?),
            Algorithm::RaCtde => AnyController::Ctde(Ctde::new(
                n,
                cfg.history_len,
                cfg.learner_config(),
                cfg.scaling(),
                cfg.central_width_scale(),
                &mut rng,
            )),
        })
    }

    pub fn as_controller(&mut self) -> &mut dyn Controller {
        match self {
            AnyController::Proposed(c) => c,
            AnyController::RaP(c) => c,
            AnyController::Backoff(c) => c,
            AnyController::Ctde(c) => c,
        }
    }

    /// Turns learning on or off (no effect for non-learning baselines).
    pub fn set_learning(&mut self, on: bool) {
        match self {
            AnyController::Proposed(c) => c.learning = on,
            AnyController::Ctde(c) => c.learning = on,
            _ => {}
        }
    }
}

/// Per-episode figures derived from [`EpisodeMetrics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub run: usize,
    pub episode: usize,
    pub tput_mbps: f64,
    /// Average over devices of their mean delay.
    pub delay_ms: Option<f64>,
    /// Mean over all successes, regardless of device.
    pub pooled_delay_ms: Option<f64>,
    pub collisions: u64,
    /// Collisions per device, counting each participant.
    pub device_collisions: f64,
    /// Per-device averages.
    pub pkt_t: f64,
    pub pkt_l: f64,
    pub ngap_tput: Option<f64>,
    pub ngap_delay: Option<f64>,
    pub device_tput: Vec<f64>,
    pub device_delay: Vec<f64>,
    pub conserved: bool,
}

impl EpisodeRecord {
    pub fn from_metrics(run: usize, episode: usize, m: &EpisodeMetrics, sim: &SimConfig) -> Result<Self> {
        let n = m.n_devices() as f64;
        let device_tput = device_throughput_mbps(m, sim)?;
        let device_delay = device_delay_ms_censored(m, sim);
        Ok(Self {
            run,
            episode,
            tput_mbps: throughput_mbps(m, sim)?,
            delay_ms: device_average_delay_ms(m, sim),
            pooled_delay_ms: mean_delay_ms(m, sim),
            collisions: m.pkt_c,
            device_collisions: m.device_collisions.iter().sum::<u64>() as f64 / n,
            pkt_t: m.total_pkt_t() as f64 / n,
            pkt_l: m.total_pkt_l() as f64 / n,
            ngap_tput: n_gap(&device_tput).ok(),
            ngap_delay: n_gap(&device_delay).ok(),
            device_tput,
            device_delay,
            conserved: m.conservation_holds(),
        })
    }

    pub fn tput_min(&self) -> f64 {
        self.device_tput.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn tput_max(&self) -> f64 {
        self.device_tput.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn delay_min(&self) -> f64 {
        self.device_delay.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn delay_max(&self) -> f64 {
        self.device_delay.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub updates: u64,
}

/// Episode seeds for one run: arrivals and per-device decision streams.
pub fn episode_seeds(run_seed: u64, episode: usize) -> (u64, u64) {
    (
        derive_seed(derive_seed(run_seed, STREAM_ARRIVALS), episode as u64),
        derive_seed(derive_seed(run_seed, STREAM_DECISIONS), episode as u64),
    )
}

/// Runs `episodes` episodes with one persistent controller and fresh
/// simulator state per episode.
pub fn run_episodes(
    cfg: &ExperimentConfig,
    controller: &mut dyn Controller,
    run: usize,
    run_seed: u64,
    episodes: usize,
) -> Result<Vec<EpisodeRecord>> {
    (0..episodes)
        .map(|e| {
            let (arrival_seed, decision_seed) = episode_seeds(run_seed, e);
            let sim_cfg = cfg.sim_config(arrival_seed);
            let sim = Simulator::new(sim_cfg.clone())?;
            let mut rngs = device_rngs(decision_seed, cfg.n_devices);
            let metrics = run_episode(sim, controller, &mut rngs)?;
            EpisodeRecord::from_metrics(run, e, &metrics, &sim_cfg)
        })
        .collect()
}

/// One complete run; returns its record and the trained controller.
pub fn run_single(cfg: &ExperimentConfig, run: usize) -> Result<(RunRecord, AnyController)> {
    let seed = cfg.run_seed(run);
    let wrap = |e: Error| Error::RunAborted {
        run,
        seed,
        source: Box::new(e),
    };
    let mut controller = AnyController::build(cfg, seed).map_err(wrap)?;
    let episodes = run_episodes(cfg, controller.as_controller(), run, seed, cfg.episodes).map_err(wrap)?;
    let updates = controller.as_controller().updates();
    Ok((
        RunRecord {
            run,
            seed,
            episodes,
            updates,
        },
        controller,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub algorithm: Algorithm,
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
}

/// Runs every configured run. Runs are independent and spread over the
/// available cores; results are ordered by run index, so outputs do not
/// depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Campaign> {
    run_experiment_with(cfg, |_, _| Ok(()))
}

/// Like [`run_experiment`], handing each finished run and its controller to `on_run`.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, on_run: F) -> Result<Campaign>
where
    F: Fn(&RunRecord, &AnyController) -> Result<()> + Sync,
{
    cfg.validate()?;
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(cfg.runs);
    // Once a run fails the remaining ones are skipped; the campaign reports the first failure.
    let failed = AtomicBool::new(false);
    let execute = |run: usize| {
        if failed.load(Ordering::Relaxed) {
            return None;
        }
        let out = run_single(cfg, run).and_then(|(rec, ctl)| on_run(&rec, &ctl).map(|_| rec));
        if out.is_err() {
            failed.store(true, Ordering::Relaxed);
        }
        Some(out)
    };
    let mut slots: Vec<Option<Result<RunRecord>>> = (0..cfg.runs).map(|_| None).collect();
    if workers <= 1 {
        for (run, slot) in slots.iter_mut().enumerate() {
            *slot = execute(run);
        }
    } else {
        let chunk = cfg.runs.div_ceil(workers);
        std::thread::scope(|s| {
            for (c, part) in slots.chunks_mut(chunk).enumerate() {
                let execute = &execute;
                s.spawn(move || {
                    for (k, slot) in part.iter_mut().enumerate() {
                        *slot = execute(c * chunk + k);
                    }
                });
            }
        });
    }
    if let Some(i) = slots.iter().position(|s| matches!(s, Some(Err(_)))) {
        if let Some(Err(e)) = slots.swap_remove(i) {
            return Err(e);
        }
    }
    let runs = slots
        .into_iter()
        .map(|s| s.expect("every run completes when none fails").expect("errors handled above"))
        .collect::<Vec<_>>();
    Ok(Campaign {
        algorithm: cfg.algorithm,
        config: cfg.clone(),
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for fewer than two values.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

/// Average network performance (Pkt-T, Pkt-C, Pkt-L, TPut, Delay).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceTable {
    #[serde(rename = "Pkt-T")]
    pub pkt_t: MeanStd,
    #[serde(rename = "Pkt-C")]
    pub pkt_c: MeanStd,
    #[serde(rename = "Pkt-L")]
    pub pkt_l: MeanStd,
    #[serde(rename = "TPut")]
    pub tput: MeanStd,
    #[serde(rename = "Delay")]
    pub delay: MeanStd,
    pub pooled_delay: MeanStd,
    /// Pkt-C counted per device rather than per collision event.
    pub device_pkt_c: MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    #[serde(rename = "Min")]
    pub min: f64,
    #[serde(rename = "Max")]
    pub max: f64,
    /// `(Max - Min) / Max` of the averaged extremes.
    #[serde(rename = "N-Gap")]
    pub n_gap: f64,
    /// Mean of the per-episode normalized gaps.
    pub episode_mean_n_gap: f64,
}

/// Fairness across devices (throughput and delay extremes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessTable {
    #[serde(rename = "TPut")]
    pub tput: GapEntry,
    #[serde(rename = "Delay")]
    pub delay: GapEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub algorithm: String,
    pub runs: usize,
    pub episodes: usize,
    /// Episodes `[window_start, episodes)` of every run are summarized.
    pub window_start: usize,
    pub performance: PerformanceTable,
    pub fairness: FairnessTable,
    /// Same tables over the first window of episodes, for learning curves.
    pub first_window: PerformanceTable,
    pub conservation_violations: usize,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn performance(runs: &[RunRecord], range: std::ops::Range<usize>) -> PerformanceTable {
    let per_run = |f: &dyn Fn(&EpisodeRecord) -> Option<f64>| -> MeanStd {
        let vals: Vec<f64> = runs
            .iter()
            .map(|r| mean(r.episodes[range.clone()].iter().filter_map(f)))
            .filter(|v| v.is_finite())
            .collect();
        MeanStd::of(&vals)
    };
    PerformanceTable {
        pkt_t: per_run(&|e| Some(e.pkt_t)),
        pkt_c: per_run(&|e| Some(e.collisions as f64)),
        pkt_l: per_run(&|e| Some(e.pkt_l)),
        tput: per_run(&|e| Some(e.tput_mbps)),
        delay: per_run(&|e| e.delay_ms),
        pooled_delay: per_run(&|e| e.pooled_delay_ms),
        device_pkt_c: per_run(&|e| Some(e.device_collisions)),
    }
}

fn gap_entry(
    runs: &[RunRecord],
    range: std::ops::Range<usize>,
    lo: impl Fn(&EpisodeRecord) -> f64,
    hi: impl Fn(&EpisodeRecord) -> f64,
    gap: impl Fn(&EpisodeRecord) -> Option<f64>,
) -> GapEntry {
    let eps = || runs.iter().flat_map(|r| r.episodes[range.clone()].iter());
    let min = mean(eps().map(&lo));
    let max = mean(eps().map(&hi));
    GapEntry {
        min,
        max,
        n_gap: if max > 0.0 { (max - min) / max } else { f64::NAN },
        episode_mean_n_gap: mean(eps().filter_map(gap)),
    }
}

/// Summary tables over the last `summary_window` episodes of every run.
pub fn summarize(campaign: &Campaign) -> Summary {
    let episodes = campaign.runs.first().map_or(0, |r| r.episodes.len());
    let window = campaign.config.summary_window.min(episodes);
    let last = episodes - window..episodes;
    let runs = &campaign.runs;
    Summary {
        schema: "ra-marl-summary/1".into(),
        algorithm: campaign.algorithm.to_string(),
        runs: runs.len(),
        episodes,
        window_start: last.start,
        performance: performance(runs, last.clone()),
        fairness: FairnessTable {
            tput: gap_entry(runs, last.clone(), EpisodeRecord::tput_min, EpisodeRecord::tput_max, |e| e.ngap_tput),
            delay: gap_entry(runs, last, EpisodeRecord::delay_min, EpisodeRecord::delay_max, |e| e.ngap_delay),
        },
        first_window: performance(runs, 0..window),
        conservation_violations: runs
            .iter()
            .flat_map(|r| &r.episodes)
            .filter(|e| !e.conserved)
            .count(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn episodes_csv(campaign: &Campaign) -> String {
    let mut s = format!("{EPISODES_SCHEMA}\n{EPISODES_HEADER}\n");
    let algo = campaign.algorithm;
    for r in &campaign.runs {
        for e in &r.episodes {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                e.run,
                e.episode,
                algo,
                e.tput_mbps,
                opt(e.delay_ms),
                e.collisions,
                e.pkt_t,
                e.pkt_l,
                opt(e.ngap_tput),
                opt(e.ngap_delay)
            )
            .expect("writing to a String");
        }
    }
    s
}

/// Per-episode averages across runs, one row per episode.
pub fn timeseries_csv(campaign: &Campaign) -> String {
    let mut s = format!("{TIMESERIES_SCHEMA}\n{TIMESERIES_HEADER}\n");
    let episodes = campaign.runs.first().map_or(0, |r| r.episodes.len());
    for e in 0..episodes {
        let recs: Vec<&EpisodeRecord> = campaign.runs.iter().map(|r| &r.episodes[e]).collect();
        let tmin = mean(recs.iter().map(|r| r.tput_min()));
        let tmax = mean(recs.iter().map(|r| r.tput_max()));
        let dmin = mean(recs.iter().map(|r| r.delay_min()));
        let dmax = mean(recs.iter().map(|r| r.delay_max()));
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            e,
            campaign.algorithm,
            recs.len(),
            mean(recs.iter().map(|r| r.tput_mbps)),
            mean(recs.iter().filter_map(|r| r.delay_ms)),
            mean(recs.iter().map(|r| r.collisions as f64)),
            tmin,
            tmax,
            tmax - tmin,
            dmin,
            dmax,
            dmax - dmin
        )
        .expect("writing to a String");
    }
    s
}

/// Output file locations, validated before a campaign starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    /// Creates `dir` and checks that every output file can be written.
    pub fn prepare(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let paths = Self { dir };
        for p in [paths.episodes(), paths.summary(), paths.timeseries()] {
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
        }
        Ok(paths)
    }

    pub fn episodes(&self) -> PathBuf {
        self.dir.join(EPISODES_CSV)
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join(SUMMARY_JSON)
    }

    pub fn timeseries(&self) -> PathBuf {
        self.dir.join(TIMESERIES_CSV)
    }

    pub fn checkpoint(&self, run: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("run-{run:03}"))
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the per-episode CSV, the JSON summary and the time-series CSV.
pub fn emit_outputs(campaign: &Campaign, paths: &OutputPaths) -> Result<Summary> {
    write(&paths.episodes(), &episodes_csv(campaign))?;
    write(&paths.timeseries(), &timeseries_csv(campaign))?;
    let summary = summarize(campaign);
    write(&paths.summary(), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub const CHECKPOINT_FORMAT: &str = "ra-marl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_PARAMS: &str = "params.json";
pub const CHECKPOINT_CONFIG: &str = "config.toml";

/// Learned parameters of one run as flat arrays with a metadata header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub algorithm: Algorithm,
    pub episode: usize,
    pub seed: u64,
    pub n_devices: usize,
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub critic: CriticKind,
    pub central_width_scale: f64,
    pub actors: Vec<Vec<f64>>,
    pub critics: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub central_critic: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture(cfg: &ExperimentConfig, controller: &AnyController, episode: usize, seed: u64) -> Result<Self> {
        let (actors, critics, central_critic) = match controller {
            AnyController::Proposed(c) => (
                c.learners.iter().map(|l| l.device.actor.net.params()).collect(),
                c.learners.iter().map(|l| l.critic.params()).collect(),
                None,
            ),
            AnyController::Ctde(c) => (
                c.devices.iter().map(|d| d.actor.net.params()).collect(),
                Vec::new(),
                Some(c.central_critic.params()),
            ),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "{} has no learned parameters",
                    cfg.algorithm
                )))
            }
        };
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            algorithm: cfg.algorithm,
            episode,
            seed,
            n_devices: cfg.n_devices,
            feature_dim: cfg.feature_dim(),
            hidden_width: cfg.hidden_width,
            hidden_layers: cfg.hidden_layers,
            critic: cfg.critic,
            central_width_scale: cfg.central_width_scale(),
            actors,
            critics,
            central_critic,
        })
    }

    /// Rebuilds a controller from `cfg` and overwrites its parameters.
    pub fn restore(&self, cfg: &ExperimentConfig) -> Result<AnyController> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        if self.algorithm != cfg.algorithm
            || self.n_devices != cfg.n_devices
            || self.feature_dim != cfg.feature_dim()
            || self.hidden_width != cfg.hidden_width
            || self.hidden_layers != cfg.hidden_layers
            || self.critic != cfg.critic
        {
            return Err(Error::Checkpoint("header does not match the configuration".into()));
        }
        let mut controller = AnyController::build(cfg, self.seed)?;
        match &mut controller {
            AnyController::Proposed(c) => {
                if self.actors.len() != c.learners.len() || self.critics.len() != c.learners.len() {
                    return Err(Error::Checkpoint("device count mismatch".into()));
                }
                for ((l, a), w) in c.learners.iter_mut().zip(&self.actors).zip(&self.critics) {
                    l.device.actor.net.set_params(a)?;
                    l.critic.set_params(w)?;
                }
            }
            AnyController::Ctde(c) => {
                if self.actors.len() != c.devices.len() {
                    return Err(Error::Checkpoint("device count mismatch".into()));
                }
                for (d, a) in c.devices.iter_mut().zip(&self.actors) {
                    d.actor.net.set_params(a)?;
                }
                let central = self
                    .central_critic
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint("missing central critic".into()))?;
                c.central_critic.set_params(central)?;
            }
            _ => return Err(Error::Checkpoint("baselines have no checkpoint".into())),
        }
        Ok(controller)
    }

    pub fn save(&self, cfg: &ExperimentConfig, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(CHECKPOINT_CONFIG), &cfg.to_toml_string())?;
        write(&dir.join(CHECKPOINT_PARAMS), &serde_json::to_string(self)?)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(ExperimentConfig, Self)> {
        let dir = dir.as_ref();
        let cfg = ExperimentConfig::load(dir.join(CHECKPOINT_CONFIG))?;
        let p = dir.join(CHECKPOINT_PARAMS);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok((cfg, serde_json::from_str(&text)?))
    }
}

/// Runs `episodes` frozen-policy episodes from a checkpoint directory.
pub fn evaluate_checkpoint(dir: impl AsRef<Path>, episodes: usize) -> Result<Campaign> {
    if episodes == 0 {
        return Err(Error::config("episodes", "must be at least 1"));
    }
    let (cfg, ckpt) = Checkpoint::load(dir)?;
    let mut controller = ckpt.restore(&cfg)?;
    controller.set_learning(false);
    let seed = derive_seed(ckpt.seed, STREAM_EVAL);
    let records = run_episodes(&cfg, controller.as_controller(), 0, seed, episodes)?;
    let config = ExperimentConfig {
        episodes,
        runs: 1,
        summary_window: episodes,
        ..cfg
    };
    Ok(Campaign {
        algorithm: config.algorithm,
        config,
        runs: vec![RunRecord {
            run: 0,
            seed,
            episodes: records,
            updates: 0,
        }],
    })
}

/// Observation/action/reward dimensions of a centralized-critic scheme.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadSpec {
    pub name: String,
    pub d_o: usize,
    pub d_a: usize,
    pub d_r: usize,
}

impl OverheadSpec {
    /// QMIX-style scheme: `D_o = N + 2`, `D_a = 1`, `D_r = 2`.
    pub fn guo(n: usize) -> Self {
        Self {
            name: "Guo".into(),
            d_o: n + 2,
            d_a: 1,
            d_r: 2,
        }
    }

    /// `D_o = 1`, `D_a = 1`, `D_r = N M`.
    pub fn yu(n: usize, m: usize) -> Self {
        Self {
            name: "Yu".into(),
            d_o: 1,
            d_a: 1,
            d_r: n * m,
        }
    }

    /// Scalars collected by a central critic per learning step: `N [M (D_o + D_a) + D_r]`.
    pub fn ctde_cost(&self, n: usize, m: usize) -> usize {
        n * (m * (self.d_o + self.d_a) + self.d_r)
    }
}

/// Scalars exchanged per learning step by reward gossip: `N K G D_r`.
pub fn decentralized_cost(n: usize, k: usize, rounds: usize, d_r: usize) -> usize {
    n * k * rounds * d_r
}

/// Default links per device for the comparison: `ceil(N / 4)`, at least 1.
pub fn default_links(n: usize) -> usize {
    n.div_ceil(4).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub n: usize,
    pub k: usize,
    pub lambda2: f64,
    pub rounds: usize,
    pub guo: usize,
    pub yu: usize,
    pub decentralized: usize,
}

/// Overhead of the two centralized schemes versus reward gossip on a ring
/// lattice with `K = ceil(N/4)` links per side, `G` from `eps`.
pub fn overhead_table(n_range: std::ops::RangeInclusive<usize>, m: usize, eps: f64) -> Result<Vec<OverheadRow>> {
    n_range
        .map(|n| {
            if n < 2 {
                return Err(Error::config("nmin", "overhead needs at least 2 devices"));
            }
            let k = default_links(n);
            let l = consensus_matrix(&Graph::ring_lattice(n, k), WeightRule::EqualNeighbor)?;
            let lambda2 = crate::consensus::second_eigenvalue_modulus(&l);
            let rounds = crate::consensus::rounds_for_accuracy(&l, eps)?;
            Ok(OverheadRow {
                n,
                k,
                lambda2,
                rounds,
                guo: OverheadSpec::guo(n).ctde_cost(n, m),
                yu: OverheadSpec::yu(n, m).ctde_cost(n, m),
                decentralized: decentralized_cost(n, k, rounds, 1),
            })
        })
        .collect()
}

pub fn overhead_csv(rows: &[OverheadRow]) -> String {
    let mut s = String::from("n,k,lambda2,rounds,guo,yu,decentralized\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{},{}", r.n, r.k, r.lambda2, r.rounds, r.guo, r.yu, r.decentralized)
            .expect("writing to a String");
    }
    s
}

/// Builds the actor of one device from flat parameters; used by tools that
/// inspect a checkpoint without a full controller.
pub fn actor_from_params(shape: NetShape, params: &[f64]) -> Result<Actor> {
    let mut actor = Actor::new(shape, &mut rng_from(0));
    actor.net.set_params(params)?;
    Ok(actor)
}

/// Linear critic from flat parameters.
pub fn critic_from_params(params: Vec<f64>) -> Critic {
    Critic::Linear { weights: params }
}
