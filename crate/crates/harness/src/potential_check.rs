//! Exact one-step contraction checks on states reached by seeded ADSAGA runs.

use adsaga_core::adsaga::theoretical_eta;
use adsaga_core::potential::{ContractionReport, Potential, TrajectoryResiduals};
use adsaga_core::sim::Simulated;
use adsaga_core::{partition, AdsagaSim, DelayModel, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::HarnessError;

#[derive(Debug, Clone)]
pub struct CheckSettings {
    pub m: usize,
    pub rates: Option<Vec<f64>>,
    /// Defaults to the theoretical step size.
    pub eta: Option<f64>,
    pub states: usize,
    /// Each state is reached after a uniformly drawn number of steps below this.
    pub max_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StateCheck {
    pub state: usize,
    pub steps: usize,
    #[serde(flatten)]
    pub contraction: ContractionReport,
    pub residuals: TrajectoryResiduals,
}

/// Runs `states` independent ADSAGA runs from a fixed non-optimal start and
/// checks the expected next potential at each end state.
pub fn check_states(problem: &Problem, settings: &CheckSettings) -> Result<(f64, Vec<StateCheck>), HarnessError> {
    let model = match &settings.rates {
        Some(r) => DelayModel::from_rates(r)?,
        None => DelayModel::uniform(settings.m)?,
    };
    let part = partition(problem.n(), settings.m, settings.seed)?;
    let eta = settings.eta.unwrap_or_else(|| theoretical_eta(&problem.constants(), settings.m, &model));
    let pot = Potential::new(problem, &part, model.clone(), eta)?;
    let mut lengths = ChaCha20Rng::seed_from_u64(settings.seed);
    let x0: Vec<f64> = (0..problem.d()).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let mut out = Vec::with_capacity(settings.states);
    for s in 0..settings.states {
        let steps = lengths.random_range(0..settings.max_steps.max(1));
        let mut sim = AdsagaSim::new(problem, &part, model.clone(), eta, &x0, settings.seed.wrapping_add(s as u64))?;
        for _ in 0..steps {
            sim.step();
        }
        out.push(StateCheck {
            state: s,
            steps,
            contraction: pot.check_contraction(sim.state())?,
            residuals: pot.trajectory_residuals(sim.state())?,
        });
    }
    Ok((eta, out))
}
