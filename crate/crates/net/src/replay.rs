//! Re-runs a recorded runtime execution through the logical simulator.

use adsaga_core::adsaga::{init, logical_step};
use adsaga_core::{DelayModel, Partition, Problem};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::RuntimeError;

/// Iterates after each recorded arrival. `draws[j][v]` is the function worker
/// `j` drew after its `v`-th PARAM; it is consumed by that worker's `v`-th
/// arrival. Missing trailing draws cannot affect `x` and are filled arbitrarily.
pub fn replay_adsaga(
    problem: &Problem,
    partition: &Partition,
    weights: &DelayModel,
    eta: f64,
    x0: &[f64],
    arrivals: &[u32],
    draws: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>, RuntimeError> {
    let m = partition.m();
    if draws.len() != m || weights.m() != m {
        return Err(RuntimeError::Protocol(format!(
            "replay needs {m} draw streams and weights, got {} and {}",
            draws.len(),
            weights.m()
        )));
    }
    let mut state = init(problem, partition, x0, &mut ChaCha20Rng::seed_from_u64(0))
        .map_err(|e| RuntimeError::Protocol(e.to_string()))?;
    let mut visits = vec![0usize; m];
    let mut out = Vec::with_capacity(arrivals.len());
    for &j in arrivals {
        let j = j as usize;
        if j >= m {
            return Err(RuntimeError::Protocol(format!("arrival from unknown machine {j}")));
        }
        let i = draws[j].get(visits[j]).copied().unwrap_or(partition.set(j)[0]);
        if partition.owner(i) != j {
            return Err(RuntimeError::Protocol(format!("machine {j} drew {i}, which it does not own")));
        }
        visits[j] += 1;
        logical_step(&mut state, problem, partition, weights, eta, j, i);
        out.push(state.server.x.clone());
    }
    Ok(out)
}
