//! Lyapunov potential for ADSAGA and exact one-step expectations.
//!
//! With `y = x - x*`, `w = eta (U1 + m alpha_bar)` (where `U1 = sum_j u_j`) and
//! starred quantities measured against `grad f_i(x*)`:
//!
//! * `phi1 = 4 m eta (f(x) - f*)`
//! * `phi2 = (y, w)^T [[1, -1], [-1, 2]] (y, w)`
//! * `phi3 = eta^2 c3 sum_j (p_min/p_j) |g*_j|^2`
//! * `phi4 = eta^2 c4 (2 sum_i (p_min/p_owner(i)) |alpha*_i|^2 - sum_j (p_min/p_j) |beta*_j|^2)`
//! * `phi5 = eta^2 c5 sum_j |u_j|^2`
//!
//! Expectations over the next draw are exact: every `(j, i in S_j)` is applied
//! to a copy of the state with weight `p_j / |S_j|`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adsaga::{logical_step, theoretical_r, AdsagaState};
use crate::delay::DelayModel;
use crate::linalg::{dist_sq, dot, norm_sq};
use crate::problem::{Constants, Partition, Problem};

pub const ENUMERATION_LIMIT: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum PotentialError {
    #[error("exact enumeration is limited to n <= {ENUMERATION_LIMIT}, got n = {0}")]
    TooLarge(usize),
    #[error("step size {eta:e} exceeds 1/(2 r L) = {limit:e}")]
    StepTooLarge { eta: f64, limit: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialConstants {
    pub eta: f64,
    pub c1: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub r: f64,
    pub gamma: f64,
}

pub fn compute_constants(c: &Constants, m: usize, model: &DelayModel, eta: f64) -> PotentialConstants {
    let mf = m as f64;
    let spread = model.p_max() / model.p_min();
    let skew = mf / c.n as f64 * spread * spread;
    let c5 = 4.0 / 3.0 * (4.0 * mf * c.l_f * eta + 4.0);
    PotentialConstants {
        eta,
        c1: 4.0 * mf * eta,
        c3: (64.0 + 168.0 * skew) * c5,
        c4: (22.0 + 76.0 * skew) * c5,
        c5,
        r: theoretical_r(m, c.n, model),
        gamma: mf * model.p_min() * (1.0 / (4.0 * c.n as f64)).min(c.mu * eta),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSnapshot {
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
    pub phi4: f64,
    pub phi5: f64,
    pub phi: f64,
    /// `x - x*`
    pub y: Vec<f64>,
    /// `eta (U1 + m alpha_bar)`
    pub w: Vec<f64>,
}

impl PotentialSnapshot {
    pub fn terms(&self) -> [f64; 5] {
        [self.phi1, self.phi2, self.phi3, self.phi4, self.phi5]
    }
}

/// `E` over the next `(j, i)` draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Expectation {
    pub x_next: Vec<f64>,
    /// Mean change of `(x, eta (U1 + m alpha_bar))`, stacked as `2d` entries.
    pub delta: Vec<f64>,
    pub phi_next: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub phi: f64,
    pub phi_next_expected: f64,
    pub gamma: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Residuals of the expected-step identities on one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResiduals {
    /// `|E x_next - (x - eta p_min (U1 + m alpha_bar))|_inf`
    pub x_next: f64,
    /// `|E delta + p_min eta (U1 + m alpha_bar ; U1 + m alpha_bar - m grad f(x))|_inf`
    pub delta: f64,
    /// Same second block against `p_min (1 - 1/n)(U1 + m alpha_bar) + m p_min grad f(x)`,
    /// the alternative closed form. Reported, not expected to vanish.
    pub alternative_form: f64,
}

/// Potential evaluator bound to one problem, partition and rate model.
#[derive(Debug, Clone)]
pub struct Potential<'a> {
    problem: &'a Problem,
    partition: &'a Partition,
    model: DelayModel,
    constants: PotentialConstants,
    grad_star: Vec<f64>,
}

impl<'a> Potential<'a> {
    pub fn new(problem: &'a Problem, partition: &'a Partition, model: DelayModel, eta: f64) -> Result<Self, PotentialError> {
        if partition.n() != problem.n() || partition.m() != model.m() {
            return Err(PotentialError::Shape(format!(
                "partition {} x {}, problem n = {}, model m = {}",
                partition.m(),
                partition.n(),
                problem.n(),
                model.m()
            )));
        }
        let constants = compute_constants(&problem.constants(), partition.m(), &model, eta);
        Ok(Potential { problem, partition, model, constants, grad_star: problem.grads_at_optimum() })
    }

    pub fn constants(&self) -> &PotentialConstants {
        &self.constants
    }

    fn star(&self, i: usize) -> &[f64] {
        let d = self.problem.d();
        &self.grad_star[i * d..(i + 1) * d]
    }

    /// `U1 + m alpha_bar`.
    fn drift(&self, state: &AdsagaState) -> Vec<f64> {
        let m = state.m() as f64;
        let mut v = state.u_sum();
        v.iter_mut().zip(&state.server.alpha_bar).for_each(|(a, b)| *a += m * b);
        v
    }

    pub fn evaluate(&self, state: &AdsagaState) -> PotentialSnapshot {
        let k = &self.constants;
        let eta2 = k.eta * k.eta;
        let x = &state.server.x;
        let y: Vec<f64> = x.iter().zip(self.problem.x_star()).map(|(a, b)| a - b).collect();
        let w: Vec<f64> = self.drift(state).into_iter().map(|v| k.eta * v).collect();
        let phi1 = k.c1 * self.problem.objective_gap(x);
        let phi2 = norm_sq(&y) - 2.0 * dot(&y, &w) + 2.0 * norm_sq(&w);

        let mut g_sum = 0.0;
        let mut beta_sum = 0.0;
        for (j, wk) in state.workers.iter().enumerate() {
            let star = self.star(wk.last_index);
            g_sum += self.model.ratio(j) * dist_sq(&wk.g, star);
            beta_sum += self.model.ratio(j) * dist_sq(&wk.beta, star);
        }
        let alpha_sum: f64 = (0..self.problem.n())
            .map(|i| self.model.ratio(self.partition.owner(i)) * dist_sq(state.alpha(self.partition, i), self.star(i)))
            .sum();
        let phi3 = eta2 * k.c3 * g_sum;
        let phi4 = eta2 * k.c4 * (2.0 * alpha_sum - beta_sum);
        let phi5 = eta2 * k.c5 * norm_sq(&state.server.u);
        PotentialSnapshot { phi1, phi2, phi3, phi4, phi5, phi: phi1 + phi2 + phi3 + phi4 + phi5, y, w }
    }

    pub fn expected_next(&self, state: &AdsagaState) -> Result<Expectation, PotentialError> {
        let n = self.problem.n();
        if n > ENUMERATION_LIMIT {
            return Err(PotentialError::TooLarge(n));
        }
        let d = self.problem.d();
        let eta = self.constants.eta;
        let drift = self.drift(state);
        let mut x_next = vec![0.0; d];
        let mut delta = vec![0.0; 2 * d];
        let mut phi_next = 0.0;
        for j in 0..self.partition.m() {
            let set = self.partition.set(j);
            let weight = self.model.p(j) / set.len() as f64;
            for &i in set {
                let mut next = state.clone();
                logical_step(&mut next, self.problem, self.partition, &self.model, eta, j, i);
                let next_drift = self.drift(&next);
                for k in 0..d {
                    x_next[k] += weight * next.server.x[k];
                    delta[k] += weight * (next.server.x[k] - state.server.x[k]);
                    delta[d + k] += weight * eta * (next_drift[k] - drift[k]);
                }
                phi_next += weight * self.evaluate(&next).phi;
            }
        }
        Ok(Expectation { x_next, delta, phi_next })
    }

    pub fn trajectory_residuals(&self, state: &AdsagaState) -> Result<TrajectoryResiduals, PotentialError> {
        let e = self.expected_next(state)?;
        let d = self.problem.d();
        let eta = self.constants.eta;
        let p_min = self.model.p_min();
        let m = self.partition.m() as f64;
        let n = self.problem.n() as f64;
        let drift = self.drift(state);
        let grad = self.problem.grad_full(&state.server.x);
        let scale = 1.0 + drift.iter().chain(&grad).fold(0.0f64, |a, v| a.max(eta * v.abs()));
        let (mut rx, mut rd, mut ra) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..d {
            let step = eta * p_min * drift[k];
            rx = rx.max((e.x_next[k] - (state.server.x[k] - step)).abs());
            rd = rd.max((e.delta[k] + step).abs());
            rd = rd.max((e.delta[d + k] + eta * p_min * (drift[k] - m * grad[k])).abs());
            let alternative = eta * (p_min * (1.0 - 1.0 / n) * drift[k] + m * p_min * grad[k]) - eta * drift[k];
            ra = ra.max((e.delta[d + k] - alternative).abs());
        }
        Ok(TrajectoryResiduals { x_next: rx / scale, delta: rd / scale, alternative_form: ra / scale })
    }

    /// Passes iff `E[phi(k+1)] <= (1 - gamma) phi(k) + 1e-9 phi(k)`.
    pub fn check_contraction(&self, state: &AdsagaState) -> Result<ContractionReport, PotentialError> {
        let phi = self.evaluate(state).phi;
        let e = self.expected_next(state)?;
        let gamma = self.constants.gamma;
        let rhs = (1.0 - gamma) * phi;
        Ok(ContractionReport {
            phi,
            phi_next_expected: e.phi_next,
            gamma,
            lhs: e.phi_next,
            rhs,
            pass: e.phi_next <= rhs + 1e-9 * phi,
        })
    }

    /// Exact expectation of `phi` at a fresh state over the initial `i_j` draws.
    pub fn expected_initial(&self, x0: &[f64]) -> f64 {
        let k = &self.constants;
        let eta2 = k.eta * k.eta;
        let mut drawn = 0.0;
        for j in 0..self.partition.m() {
            let set = self.partition.set(j);
            let mean: f64 = set.iter().map(|&i| norm_sq(self.star(i))).sum::<f64>() / set.len() as f64;
            drawn += self.model.ratio(j) * mean;
        }
        let all: f64 = (0..self.problem.n())
            .map(|i| self.model.ratio(self.partition.owner(i)) * norm_sq(self.star(i)))
            .sum();
        k.c1 * self.problem.objective_gap(x0)
            + dist_sq(x0, self.problem.x_star())
            + eta2 * (k.c3 * drawn + k.c4 * (2.0 * all - drawn))
    }
}

/// `4 m eta gap0 + |x0 - x*|^2 + eta^2 (m (c3 - c4) + 2 n c4) sigma^2`, the
/// expected fresh-state potential under uniform rates.
pub fn initial_potential_uniform(k: &PotentialConstants, c: &Constants, m: usize, gap0: f64, dist0: f64) -> f64 {
    let mf = m as f64;
    k.c1 * gap0 + dist0 + k.eta * k.eta * (mf * (k.c3 - k.c4) + 2.0 * c.n as f64 * k.c4) * c.sigma_sq
}

/// `(4 m eta + 2/mu)(f(x0) - f*) + 2 eta m n sigma^2 / L`, valid for `eta <= 1/(2 r L)`.
pub fn initial_potential_bound(problem: &Problem, m: usize, model: &DelayModel, eta: f64, x0: &[f64]) -> Result<f64, PotentialError> {
    let c = problem.constants();
    let limit = 1.0 / (2.0 * theoretical_r(m, c.n, model) * c.l);
    if !(eta > 0.0 && eta <= limit) {
        return Err(PotentialError::StepTooLarge { eta, limit });
    }
    let mf = m as f64;
    Ok((4.0 * mf * eta + 2.0 / c.mu) * problem.objective_gap(x0) + 2.0 * eta * mf * c.n as f64 * c.sigma_sq / c.l)
}
