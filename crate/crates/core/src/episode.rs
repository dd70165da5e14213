//! Episode loop shared by every algorithm.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sim::{Action, EpisodeMetrics, Outcome, Simulator};

/// A transmission policy for all devices, optionally learning as it goes.
pub trait Controller {
    fn begin_episode(&mut self, _sim: &Simulator) -> Result<()> {
        Ok(())
    }

    /// Decision of `device` at a decision epoch, drawing from that device's RNG.
    fn decide(&mut self, device: usize, sim: &Simulator, rng: &mut ChaCha8Rng) -> Result<Action>;

    /// Called when an epoch's transmissions have been resolved.
    fn on_outcome(&mut self, _outcome: &Outcome) {}

    /// End-of-slot hook (learning steps happen here).
    fn end_slot(&mut self, _sim: &Simulator) -> Result<()> {
        Ok(())
    }

    /// Number of learning steps performed so far.
    fn updates(&self) -> u64 {
        0
    }
}

/// Runs one episode to the horizon. `rngs` holds one decision stream per device.
pub fn run_episode<C: Controller + ?Sized>(
    mut sim: Simulator,
    controller: &mut C,
    rngs: &mut [ChaCha8Rng],
) -> Result<EpisodeMetrics> {
    let n = sim.config().n_devices;
    if rngs.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: rngs.len(),
        });
    }
    controller.begin_episode(&sim)?;
    let mut transmitting = Vec::with_capacity(n);
    while !sim.is_finished() {
        let report = sim.advance_slot()?;
        if !report.ready.is_empty() {
            transmitting.clear();
            for &i in &report.ready {
                if controller.decide(i, &sim, &mut rngs[i])? == Action::Transmit {
                    transmitting.push(i);
                }
            }
            let outcome = sim.resolve_transmissions(&transmitting)?;
            controller.on_outcome(&outcome);
        }
        controller.end_slot(&sim)?;
    }
    Ok(sim.finish())
}
