//! Slotted CSMA/CA random-access simulation with consensus-based,
//! fully decentralized multi-agent actor-critic learning.
//!
//! Module map:
//! - [`consensus`]: communication graph, doubly stochastic weights, reward gossip
//! - [`sim`]: slot-accurate listen-before-talk channel and episode counters
//! - [`mdp`]: observations, local rewards, observation-action histories
//! - [`nn`], [`learn`]: actor MLP, linear critic, TD error and updates
//! - [`decentralized`]: the reward-consensus learner as a [`episode::Controller`]
//! - [`baselines`]: fixed probability, fixed/BEB contention windows, CTDE
//! - [`harness`]: experiment configs, campaigns, outputs, overhead comparison

pub mod baselines;
pub mod consensus;
pub mod decentralized;
pub mod episode;
pub mod error;
pub mod harness;
pub mod learn;
pub mod mdp;
pub mod nn;
pub mod seed;
pub mod sim;

pub use error::{Error, Result};
