//! The ADSAGA state machine in its logical (one machine per iteration) form.
//!
//! One logical iteration with machine `j`, fresh function `i` in `S_j`,
//! `ratio = p_min / p_j` and `h_old = h_j` at entry:
//!
//! 1. `alpha[i_j] <- g_j`
//! 2. `x <- x - eta * ratio * (u_j + alpha_bar)`
//! 3. `alpha_bar <- alpha_bar + h_old / n`
//! 4. `u_j <- u_j - (m/n) h_old`
//! 5. `g_j <- grad f_i(x_entry)`, `beta_j <- alpha[i]`, `h_j <- g_j - beta_j`
//! 6. `u_j <- u_j (1 - ratio) + ratio h_j`
//! 7. `i_j <- i`, `x_j <- x_entry`
//!
//! Steps 4 and 6 together give
//! `u_new = u_old (1 - ratio) + ratio h_new - (m/n)(1 - ratio) h_old`.
//! The parameter-server runtime performs step 6 lazily, when machine `j`'s next
//! update arrives, through the same [`server_fold`]/[`server_apply`] helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::delay::DelayModel;
use crate::linalg::{norm_sq, rel_err};
use crate::problem::{Constants, Partition, Problem};
use crate::sim::Simulated;

#[derive(Debug, Error, PartialEq)]
pub enum AdsagaError {
    #[error("epsilon {eps:e} must be below the bound numerator {numerator:e}")]
    EpsilonTooLarge { eps: f64, numerator: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Parameter-server state.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// `m x d` row-major; row `j` is `u_j`.
    pub u: Vec<f64>,
    pub iteration: u64,
}

/// State local to machine `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub x_local: Vec<f64>,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub beta: Vec<f64>,
    /// Function behind `g` (`i_j`).
    pub last_index: usize,
    /// `alpha_i` for `i` in `S_j`, stored by slot (see [`Partition::slot`]).
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdsagaState {
    pub server: ServerState,
    pub workers: Vec<WorkerState>,
    d: usize,
}

impl AdsagaState {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.workers.len()
    }

    pub fn u(&self, j: usize) -> &[f64] {
        &self.server.u[j * self.d..(j + 1) * self.d]
    }

    pub fn alpha(&self, partition: &Partition, i: usize) -> &[f64] {
        let s = partition.slot(i);
        &self.workers[partition.owner(i)].alpha[s * self.d..(s + 1) * self.d]
    }

    /// `sum_j u_j`.
    pub fn u_sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.d];
        for row in self.server.u.chunks_exact(self.d) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        acc
    }

    /// `(1/n) sum_i alpha_i`, recomputed from the worker tables.
    pub fn alpha_mean(&self, n: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.d];
        for w in &self.workers {
            for a in w.alpha.chunks_exact(self.d) {
                acc.iter_mut().zip(a).for_each(|(s, v)| *s += v);
            }
        }
        acc.iter_mut().for_each(|v| *v /= n as f64);
        acc
    }
}

/// Zero state at `x0`; each `i_j` is drawn uniformly from `S_j`.
pub fn init<R: Rng + ?Sized>(problem: &Problem, partition: &Partition, x0: &[f64], rng: &mut R) -> Result<AdsagaState, AdsagaError> {
    let d = problem.d();
    if x0.len() != d || partition.n() != problem.n() {
        return Err(AdsagaError::Shape(format!(
            "x0 has {} entries for d = {d}; partition covers {} of {} components",
            x0.len(),
            partition.n(),
            problem.n()
        )));
    }
    let m = partition.m();
    let workers = (0..m)
        .map(|j| {
            let set = partition.set(j);
            WorkerState {
                x_local: x0.to_vec(),
                h: vec![0.0; d],
                g: vec![0.0; d],
                beta: vec![0.0; d],
                last_index: set[rng.random_range(0..set.len())],
                alpha: vec![0.0; set.len() * d],
            }
        })
        .collect();
    Ok(AdsagaState {
        server: ServerState { x: x0.to_vec(), alpha_bar: vec![0.0; d], u: vec![0.0; m * d], iteration: 0 },
        workers,
        d,
    })
}

/// `eta * p_min / p_j`.
pub fn step_size_local(eta: f64, model: &DelayModel, j: usize) -> f64 {
    eta * model.ratio(j)
}

/// Steps 2-4: the stale step on `x` and the fold of `h_old` into `alpha_bar`
/// and `u_j`.
#[inline]
pub fn server_apply(x: &mut [f64], alpha_bar: &mut [f64], u_j: &mut [f64], h_old: &[f64], eta_j: f64, m_over_n: f64, n: f64) {
    for k in 0..x.len() {
        x[k] -= eta_j * (u_j[k] + alpha_bar[k]);
        alpha_bar[k] += h_old[k] / n;
        u_j[k] -= m_over_n * h_old[k];
    }
}

/// Step 6: `u_j <- u_j (1 - ratio) + ratio h_new`.
#[inline]
pub fn server_fold(u_j: &mut [f64], h_new: &[f64], ratio: f64) {
    let keep = 1.0 - ratio;
    for (u, h) in u_j.iter_mut().zip(h_new) {
        *u = *u * keep + ratio * h;
    }
}

/// Worker half: `g <- grad f_i(x)`, `beta <- alpha_i`, `h <- g - beta`.
#[inline]
pub fn worker_compute(problem: &Problem, i: usize, x: &[f64], alpha_i: &[f64], g: &mut [f64], beta: &mut [f64], h: &mut [f64]) {
    problem.grad_component_into(i, x, g);
    beta.copy_from_slice(alpha_i);
    for k in 0..g.len() {
        h[k] = g[k] - beta[k];
    }
}

/// One logical iteration with machine `j` and function `i` (which must lie in `S_j`).
pub fn logical_step(
    state: &mut AdsagaState,
    problem: &Problem,
    partition: &Partition,
    model: &DelayModel,
    eta: f64,
    j: usize,
    i: usize,
) {
    debug_assert_eq!(partition.owner(i), j);
    let d = state.d;
    let n = problem.n() as f64;
    let m_over_n = partition.m() as f64 / n;
    let ratio = model.ratio(j);
    let server = &mut state.server;
    let w = &mut state.workers[j];

    let prev = partition.slot(w.last_index);
    w.alpha[prev * d..(prev + 1) * d].copy_from_slice(&w.g);

    // x_j <- x_entry now; nothing reads x_local before step 5.
    w.x_local.copy_from_slice(&server.x);
    let u_j = &mut server.u[j * d..(j + 1) * d];
    server_apply(&mut server.x, &mut server.alpha_bar, u_j, &w.h, eta * ratio, m_over_n, n);

    let s = partition.slot(i);
    worker_compute(problem, i, &w.x_local, &w.alpha[s * d..(s + 1) * d], &mut w.g, &mut w.beta, &mut w.h);
    server_fold(u_j, &w.h, ratio);
    w.last_index = i;
    server.iteration += 1;
}

/// Draws `j ~ P` from `machines` and `i ~ Uniform(S_j)` from `functions`.
pub fn sample_draw<R: Rng + ?Sized>(model: &DelayModel, partition: &Partition, machines: &mut R, functions: &mut R) -> (usize, usize) {
    let j = model.sample_machine(machines);
    let set = partition.set(j);
    (j, set[functions.random_range(0..set.len())])
}

/// Root-seed stream layout shared by every simulator in this crate.
pub mod streams {
    use super::*;

    pub const INIT: u64 = 0;
    pub const MACHINES: u64 = 1;
    pub const FUNCTIONS: u64 = 2;

    /// `ChaCha20Rng::seed_from_u64(seed)` moved to stream `stream`.
    pub fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
        let mut r = ChaCha20Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    }
}

/// Seeded driver around [`logical_step`].
#[derive(Debug, Clone)]
pub struct AdsagaSim<'a> {
    problem: &'a Problem,
    partition: &'a Partition,
    model: DelayModel,
    /// Rates the update rule assumes; differs from `model` for vanilla runs.
    weights: DelayModel,
    eta: f64,
    state: AdsagaState,
    machines: ChaCha20Rng,
    functions: ChaCha20Rng,
}

impl<'a> AdsagaSim<'a> {
    pub fn new(
        problem: &'a Problem,
        partition: &'a Partition,
        model: DelayModel,
        eta: f64,
        x0: &[f64],
        seed: u64,
    ) -> Result<Self, AdsagaError> {
        let weights = model.clone();
        Self::with_update_model(problem, partition, model, weights, eta, x0, seed)
    }

    /// Samples machines from `model` while the step weights come from `weights`.
    pub fn with_update_model(
        problem: &'a Problem,
        partition: &'a Partition,
        model: DelayModel,
        weights: DelayModel,
        eta: f64,
        x0: &[f64],
        seed: u64,
    ) -> Result<Self, AdsagaError> {
        if model.m() != partition.m() || weights.m() != partition.m() {
            return Err(AdsagaError::Shape(format!(
                "delay model has {} machines, partition has {}",
                model.m(),
                partition.m()
            )));
        }
        let state = init(problem, partition, x0, &mut streams::rng(seed, streams::INIT))?;
        Ok(AdsagaSim {
            problem,
            partition,
            model,
            weights,
            eta,
            state,
            machines: streams::rng(seed, streams::MACHINES),
            functions: streams::rng(seed, streams::FUNCTIONS),
        })
    }

    pub fn state(&self) -> &AdsagaState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut AdsagaState {
        &mut self.state
    }

    pub fn model(&self) -> &DelayModel {
        &self.model
    }

    pub fn weights(&self) -> &DelayModel {
        &self.weights
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn next_draw(&mut self) -> (usize, usize) {
        sample_draw(&self.model, self.partition, &mut self.machines, &mut self.functions)
    }

    pub fn apply(&mut self, j: usize, i: usize) {
        logical_step(&mut self.state, self.problem, self.partition, &self.weights, self.eta, j, i);
    }
}

impl Simulated for AdsagaSim<'_> {
    fn step(&mut self) -> Option<usize> {
        let (j, i) = self.next_draw();
        self.apply(j, i);
        Some(j)
    }

    fn iterate(&self) -> &[f64] {
        &self.state.server.x
    }

    fn grads_per_step(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantViolation {
    pub invariant: &'static str,
    pub machine: Option<usize>,
    pub error: f64,
}

impl std::fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} violated (machine {:?}, error {:e})", self.invariant, self.machine, self.error)
    }
}

impl std::error::Error for InvariantViolation {}

/// Per-state invariants: `alpha_bar` consistency (1e-10), `alpha[i_j] = beta_j`,
/// `h_j = g_j - beta_j`, and `u_j = h_j` under uniform rates (1e-12).
pub fn check_state(state: &AdsagaState, partition: &Partition, model: &DelayModel) -> Result<(), InvariantViolation> {
    let n = partition.n();
    let err = rel_err(&state.server.alpha_bar, &state.alpha_mean(n));
    if err > 1e-10 {
        return Err(InvariantViolation { invariant: "alpha_bar = mean(alpha)", machine: None, error: err });
    }
    for (j, w) in state.workers.iter().enumerate() {
        let e = rel_err(state.alpha(partition, w.last_index), &w.beta);
        if e > 0.0 {
            return Err(InvariantViolation { invariant: "alpha[i_j] = beta_j", machine: Some(j), error: e });
        }
        let diff: Vec<f64> = w.g.iter().zip(&w.beta).map(|(g, b)| g - b).collect();
        let e = rel_err(&w.h, &diff);
        if e > 0.0 {
            return Err(InvariantViolation { invariant: "h_j = g_j - beta_j", machine: Some(j), error: e });
        }
        if model.is_uniform() {
            let e = rel_err(state.u(j), &w.h);
            if e > 1e-12 {
                return Err(InvariantViolation { invariant: "u_j = h_j (uniform rates)", machine: Some(j), error: e });
            }
        }
    }
    Ok(())
}

/// The combined `u` update for the machine `j` that moved from `before` to `after`.
pub fn check_star_identity(
    before: &AdsagaState,
    after: &AdsagaState,
    model: &DelayModel,
    j: usize,
    n: usize,
) -> Result<(), InvariantViolation> {
    let ratio = model.ratio(j);
    let m_over_n = before.m() as f64 / n as f64;
    let expected: Vec<f64> = (0..before.d)
        .map(|k| {
            before.u(j)[k] * (1.0 - ratio) + ratio * after.workers[j].h[k]
                - m_over_n * (1.0 - ratio) * before.workers[j].h[k]
        })
        .collect();
    let e = rel_err(after.u(j), &expected);
    if e > 1e-12 {
        return Err(InvariantViolation { invariant: "combined u update", machine: Some(j), error: e });
    }
    for k in (0..before.m()).filter(|k| *k != j) {
        if before.u(k) != after.u(k) {
            return Err(InvariantViolation { invariant: "untouched u_k unchanged", machine: Some(k), error: f64::NAN });
        }
    }
    Ok(())
}

/// `r = 8 (76 + 168 (p_max/p_min)^2 m/n) / 3`.
pub fn theoretical_r(m: usize, n: usize, model: &DelayModel) -> f64 {
    let spread = model.p_max() / model.p_min();
    8.0 * (76.0 + 168.0 * spread * spread * m as f64 / n as f64) / 3.0
}

/// `eta = 1 / (2 r L + 2 sqrt(r m L_f L))`.
pub fn theoretical_eta(c: &Constants, m: usize, model: &DelayModel) -> f64 {
    let r = theoretical_r(m, c.n, model);
    1.0 / (2.0 * r * c.l + 2.0 * (r * m as f64 * c.l_f * c.l).sqrt())
}

/// Argument of the logarithm in the iteration bound, before dividing by epsilon:
/// `(1 + 1/(2 m mu eta)) (f(x0) - f*) + n sigma^2 / (2L)` at the theoretical `eta`.
pub fn iteration_bound_numerator(c: &Constants, m: usize, model: &DelayModel, initial_gap: f64) -> f64 {
    let eta = theoretical_eta(c, m, model);
    (1.0 + 1.0 / (2.0 * m as f64 * c.mu * eta)) * initial_gap + c.n as f64 * c.sigma_sq / (2.0 * c.l)
}

/// Iterations sufficient for `E[f(x^k) - f*] <= eps` at the theoretical step size.
pub fn iteration_bound(c: &Constants, m: usize, model: &DelayModel, initial_gap: f64, eps: f64) -> Result<u64, AdsagaError> {
    let numerator = iteration_bound_numerator(c, m, model, initial_gap);
    if !(eps > 0.0 && eps < numerator) {
        return Err(AdsagaError::EpsilonTooLarge { eps, numerator });
    }
    let r = theoretical_r(m, c.n, model);
    let mf = m as f64;
    let prefactor = mf * model.p_min()
        * (4.0 * c.n as f64 + 2.0 * r * c.l / c.mu + 2.0 * r.sqrt() * (mf * c.l_f * c.l).sqrt() / c.mu);
    Ok((prefactor * (numerator / eps).ln()).ceil() as u64)
}

pub fn theoretical_iterations(problem: &Problem, m: usize, model: &DelayModel, eps: f64, x0: &[f64]) -> Result<u64, AdsagaError> {
    iteration_bound(&problem.constants(), m, model, problem.objective_gap(x0), eps)
}

/// Sum of squared norms of the `u_j`; handy for diagnostics.
pub fn u_energy(state: &AdsagaState) -> f64 {
    norm_sq(&state.server.u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{generate_least_squares, partition};

    #[test]
    fn local_step_sizes() {
        let model = DelayModel::from_rates(&[0.5, 0.25, 0.25]).unwrap();
        assert!((step_size_local(0.1, &model, 0) - 0.05).abs() < 1e-15);
        assert_eq!(step_size_local(0.1, &model, 1), 0.1);
        let u = DelayModel::uniform(5).unwrap();
        assert!((0..5).all(|j| step_size_local(0.3, &u, j) == 0.3));
    }

    #[test]
    fn r_formula() {
        let u10 = DelayModel::uniform(10).unwrap();
        assert!((theoretical_r(10, 120, &u10) - 240.0).abs() < 1e-12);
        let u4 = DelayModel::uniform(4).unwrap();
        assert!((theoretical_r(4, 4, &u4) - 8.0 * 244.0 / 3.0).abs() < 1e-12);
        let spread = DelayModel::from_rates(&[2.0, 1.0]).unwrap();
        assert!((theoretical_r(0, 1_000_000, &spread) - 608.0 / 3.0).abs() < 1e-12);
    }

    fn unit_constants(n: usize) -> Constants {
        Constants { n, l: 1.0, l_f: 1.0, mu: 1.0, sigma_sq: 0.0 }
    }

    #[test]
    fn eta_formula() {
        let model = DelayModel::uniform(2).unwrap();
        let c = unit_constants(4);
        let r = theoretical_r(2, 4, &model);
        assert!((r - 426.666_666_666_666_7).abs() < 1e-9);
        let eta = theoretical_eta(&c, 2, &model);
        assert!((eta - 1.0 / (2.0 * r + 2.0 * (2.0 * r).sqrt())).abs() < 1e-18);
        assert!((eta - 1.0968e-3).abs() < 1e-7);
        assert!(eta < 1.0 / (2.0 * r));
        let stiffer = Constants { l: 2.0, ..c };
        assert!(theoretical_eta(&stiffer, 2, &model) < eta);
    }

    #[test]
    fn iteration_formula() {
        let model = DelayModel::uniform(2).unwrap();
        let c = unit_constants(4);
        let num = iteration_bound_numerator(&c, 2, &model, 1.0);
        let k = iteration_bound(&c, 2, &model, 1.0, num / std::f64::consts::E).unwrap();
        assert_eq!(k, 928);
        assert!(iteration_bound(&c, 2, &model, 1.0, num).is_err());
        assert!(iteration_bound(&c, 2, &model, 1.0, 0.0).is_err());
        // m p_min = 1 under uniform rates.
        for m in [1usize, 2, 4] {
            let u = DelayModel::uniform(m).unwrap();
            assert!((m as f64 * u.p_min() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn first_visit_leaves_x_fixed() {
        let p = generate_least_squares(12, 3, 1.0, 1).unwrap();
        let part = partition(12, 3, 1).unwrap();
        let model = DelayModel::uniform(3).unwrap();
        let x0 = vec![1.0, -2.0, 0.5];
        let mut sim = AdsagaSim::new(&p, &part, model, 0.1, &x0, 3).unwrap();
        for j in 0..3 {
            let i = part.set(j)[0];
            sim.apply(j, i);
            assert_eq!(sim.state().server.x, x0);
        }
        sim.apply(0, part.set(0)[1]);
        assert_ne!(sim.state().server.x, x0);
    }

    #[test]
    fn zero_problem_stays_put() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, -1.0]];
        let p = Problem::from_rows(&rows, &[0.0; 4]).unwrap();
        let part = partition(4, 2, 0).unwrap();
        let mut sim = AdsagaSim::new(&p, &part, DelayModel::uniform(2).unwrap(), 0.5, &[0.0, 0.0], 0).unwrap();
        let before = sim.state().clone();
        for _ in 0..20 {
            sim.step();
        }
        assert_eq!(sim.state().server.x, before.server.x);
        assert_eq!(sim.state().server.u, before.server.u);
        assert_eq!(sim.state().server.alpha_bar, before.server.alpha_bar);
    }

    #[test]
    fn invariants_hold_under_heterogeneous_rates() {
        let p = generate_least_squares(24, 4, 1.0, 5).unwrap();
        let part = partition(24, 4, 5).unwrap();
        let model = DelayModel::from_rates(&[2.0, 1.0, 1.0, 3.0]).unwrap();
        let mut sim = AdsagaSim::new(&p, &part, model.clone(), 0.05, &[0.0; 4], 9).unwrap();
        for _ in 0..500 {
            let before = sim.state().clone();
            let (j, i) = sim.next_draw();
            sim.apply(j, i);
            check_state(sim.state(), &part, &model).unwrap();
            check_star_identity(&before, sim.state(), &model, j, 24).unwrap();
        }
    }

    #[test]
    fn shape_errors() {
        let p = generate_least_squares(12, 3, 1.0, 1).unwrap();
        let part = partition(12, 3, 1).unwrap();
        assert!(AdsagaSim::new(&p, &part, DelayModel::uniform(4).unwrap(), 0.1, &[0.0; 3], 0).is_err());
        assert!(AdsagaSim::new(&p, &part, DelayModel::uniform(3).unwrap(), 0.1, &[0.0; 2], 0).is_err());
    }
}
