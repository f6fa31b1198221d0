//! Reference algorithms under the same delay model and problem interface.
//!
//! Asynchronous baselines follow the parameter-server ordering: the delivering
//! machine receives the iterate from *before* its update is applied, so with
//! `m = 1` every gradient is exactly one step stale.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adsaga::{streams, AdsagaError, AdsagaSim};
use crate::delay::DelayModel;
use crate::linalg::{axpy, dist_sq};
use crate::problem::{Constants, Partition, Problem};
use crate::sim::Simulated;

/// Where a machine may draw its functions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Any machine may draw any `i` in `[n]`.
    Shared,
    /// Machine `j` draws only from its own `S_j`.
    #[default]
    Distributed,
}

fn check_shapes(problem: &Problem, partition: &Partition, model: Option<&DelayModel>, x0: &[f64]) -> Result<(), AdsagaError> {
    if x0.len() != problem.d() || partition.n() != problem.n() || model.is_some_and(|m| m.m() != partition.m()) {
        return Err(AdsagaError::Shape(format!(
            "d = {}, x0 has {}, partition {} x {}, model {:?} machines",
            problem.d(),
            x0.len(),
            partition.m(),
            partition.n(),
            model.map(DelayModel::m)
        )));
    }
    Ok(())
}

/// Shared-data asynchronous SAGA.
#[derive(Debug, Clone)]
pub struct Asaga<'a> {
    problem: &'a Problem,
    model: DelayModel,
    eta: f64,
    pub x: Vec<f64>,
    /// `n x d`
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// `m x d` stale iterates.
    pub x_local: Vec<f64>,
    machines: ChaCha20Rng,
    functions: ChaCha20Rng,
    grad: Vec<f64>,
}

impl<'a> Asaga<'a> {
    pub fn new(problem: &'a Problem, model: DelayModel, eta: f64, x0: &[f64], seed: u64) -> Result<Self, AdsagaError> {
        let (n, d, m) = (problem.n(), problem.d(), model.m());
        if x0.len() != d {
            return Err(AdsagaError::Shape(format!("x0 has {} entries, d = {d}", x0.len())));
        }
        Ok(Asaga {
            problem,
            model,
            eta,
            x: x0.to_vec(),
            alpha: vec![0.0; n * d],
            alpha_bar: vec![0.0; d],
            x_local: x0.repeat(m),
            machines: streams::rng(seed, streams::MACHINES),
            functions: streams::rng(seed, streams::FUNCTIONS),
            grad: vec![0.0; d],
        })
    }

    /// `U = grad f_i(x_j) - alpha_i + alpha_bar` for machine `j`'s stale iterate.
    pub fn update_direction(&self, j: usize, i: usize) -> Vec<f64> {
        let d = self.problem.d();
        let mut u = self.problem.grad_component(i, &self.x_local[j * d..(j + 1) * d]);
        for ((u, a), bar) in u.iter_mut().zip(&self.alpha[i * d..(i + 1) * d]).zip(&self.alpha_bar) {
            *u += bar - a;
        }
        u
    }

    pub fn apply(&mut self, j: usize, i: usize) {
        let d = self.problem.d();
        let n = self.problem.n() as f64;
        self.problem.grad_component_into(i, &self.x_local[j * d..(j + 1) * d], &mut self.grad);
        self.x_local[j * d..(j + 1) * d].copy_from_slice(&self.x);
        let alpha_i = &mut self.alpha[i * d..(i + 1) * d];
        for (k, a) in alpha_i.iter_mut().enumerate() {
            let h = self.grad[k] - *a;
            self.x[k] -= self.eta * (h + self.alpha_bar[k]);
            self.alpha_bar[k] += h / n;
            *a = self.grad[k];
        }
    }
}

impl Simulated for Asaga<'_> {
    fn step(&mut self) -> Option<usize> {
        let j = self.model.sample_machine(&mut self.machines);
        let i = self.functions.random_range(0..self.problem.n());
        self.apply(j, i);
        Some(j)
    }

    fn iterate(&self) -> &[f64] {
        &self.x
    }

    fn grads_per_step(&self) -> usize {
        1
    }
}

/// Distributed incremental aggregated gradient with a cyclic cursor per machine.
#[derive(Debug, Clone)]
pub struct Iag<'a> {
    problem: &'a Problem,
    partition: &'a Partition,
    model: DelayModel,
    eta: f64,
    pub x: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `sum_i alpha_i`
    pub alpha_sum: Vec<f64>,
    pub x_local: Vec<f64>,
    pub cursor: Vec<usize>,
    machines: ChaCha20Rng,
    grad: Vec<f64>,
}

impl<'a> Iag<'a> {
    pub fn new(problem: &'a Problem, partition: &'a Partition, model: DelayModel, eta: f64, x0: &[f64], seed: u64) -> Result<Self, AdsagaError> {
        check_shapes(problem, partition, Some(&model), x0)?;
        let (n, d, m) = (problem.n(), problem.d(), model.m());
        Ok(Iag {
            problem,
            partition,
            model,
            eta,
            x: x0.to_vec(),
            alpha: vec![0.0; n * d],
            alpha_sum: vec![0.0; d],
            x_local: x0.repeat(m),
            cursor: vec![0; m],
            machines: streams::rng(seed, streams::MACHINES),
            grad: vec![0.0; d],
        })
    }

    /// Delivers machine `j`'s next cyclic component.
    pub fn apply(&mut self, j: usize) -> usize {
        let d = self.problem.d();
        let set = self.partition.set(j);
        let i = set[self.cursor[j]];
        self.cursor[j] = (self.cursor[j] + 1) % set.len();
        self.problem.grad_component_into(i, &self.x_local[j * d..(j + 1) * d], &mut self.grad);
        self.x_local[j * d..(j + 1) * d].copy_from_slice(&self.x);
        let scale = self.eta / self.problem.n() as f64;
        let alpha_i = &mut self.alpha[i * d..(i + 1) * d];
        for (k, a) in alpha_i.iter_mut().enumerate() {
            self.alpha_sum[k] += self.grad[k] - *a;
            *a = self.grad[k];
            self.x[k] -= scale * self.alpha_sum[k];
        }
        i
    }
}

impl Simulated for Iag<'_> {
    fn step(&mut self) -> Option<usize> {
        let j = self.model.sample_machine(&mut self.machines);
        self.apply(j);
        Some(j)
    }

    fn iterate(&self) -> &[f64] {
        &self.x
    }

    fn grads_per_step(&self) -> usize {
        1
    }
}

/// Distributed asynchronous SGD: `x <- x - eta grad f_i(x_j)`.
#[derive(Debug, Clone)]
pub struct AsyncSgd<'a> {
    problem: &'a Problem,
    partition: &'a Partition,
    model: DelayModel,
    eta: f64,
    pub x: Vec<f64>,
    pub x_local: Vec<f64>,
    machines: ChaCha20Rng,
    functions: ChaCha20Rng,
    grad: Vec<f64>,
}

impl<'a> AsyncSgd<'a> {
    pub fn new(problem: &'a Problem, partition: &'a Partition, model: DelayModel, eta: f64, x0: &[f64], seed: u64) -> Result<Self, AdsagaError> {
        check_shapes(problem, partition, Some(&model), x0)?;
        let m = model.m();
        Ok(AsyncSgd {
            problem,
            partition,
            model,
            eta,
            x: x0.to_vec(),
            x_local: x0.repeat(m),
            machines: streams::rng(seed, streams::MACHINES),
            functions: streams::rng(seed, streams::FUNCTIONS),
            grad: vec![0.0; problem.d()],
        })
    }

    pub fn apply(&mut self, j: usize, i: usize) {
        let d = self.problem.d();
        self.problem.grad_component_into(i, &self.x_local[j * d..(j + 1) * d], &mut self.grad);
        self.x_local[j * d..(j + 1) * d].copy_from_slice(&self.x);
        axpy(-self.eta, &self.grad, &mut self.x);
    }
}

impl Simulated for AsyncSgd<'_> {
    fn step(&mut self) -> Option<usize> {
        let j = self.model.sample_machine(&mut self.machines);
        let set = self.partition.set(j);
        let i = set[self.functions.random_range(0..set.len())];
        self.apply(j, i);
        Some(j)
    }

    fn iterate(&self) -> &[f64] {
        &self.x
    }

    fn grads_per_step(&self) -> usize {
        1
    }
}

/// Synchronous minibatch SAGA (one aggregated step per round) or, with
/// `variance_reduced = false`, minibatch SGD.
#[derive(Debug, Clone)]
pub struct Minibatch<'a> {
    problem: &'a Problem,
    partition: &'a Partition,
    mode: DataMode,
    variance_reduced: bool,
    eta: f64,
    pub x: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    functions: ChaCha20Rng,
    grads: Vec<f64>,
}

impl<'a> Minibatch<'a> {
    pub fn saga(problem: &'a Problem, partition: &'a Partition, mode: DataMode, eta: f64, x0: &[f64], seed: u64) -> Result<Self, AdsagaError> {
        Self::new(problem, partition, mode, true, eta, x0, seed)
    }

    pub fn sgd(problem: &'a Problem, partition: &'a Partition, mode: DataMode, eta: f64, x0: &[f64], seed: u64) -> Result<Self, AdsagaError> {
        Self::new(problem, partition, mode, false, eta, x0, seed)
    }

    fn new(
        problem: &'a Problem,
        partition: &'a Partition,
        mode: DataMode,
        variance_reduced: bool,
        eta: f64,
        x0: &[f64],
        seed: u64,
    ) -> Result<Self, AdsagaError> {
        check_shapes(problem, partition, None, x0)?;
        let (n, d, m) = (problem.n(), problem.d(), partition.m());
        Ok(Minibatch {
            problem,
            partition,
            mode,
            variance_reduced,
            eta,
            x: x0.to_vec(),
            alpha: if variance_reduced { vec![0.0; n * d] } else { Vec::new() },
            alpha_bar: vec![0.0; d],
            functions: streams::rng(seed, streams::FUNCTIONS),
            grads: vec![0.0; m * d],
        })
    }

    pub fn m(&self) -> usize {
        self.partition.m()
    }

    /// Draws one index per machine.
    pub fn draw_batch(&mut self) -> Vec<usize> {
        let n = self.problem.n();
        (0..self.partition.m())
            .map(|j| match self.mode {
                DataMode::Shared => self.functions.random_range(0..n),
                DataMode::Distributed => {
                    let set = self.partition.set(j);
                    set[self.functions.random_range(0..set.len())]
                }
            })
            .collect()
    }

    /// One round on an explicit batch (`batch[j]` is machine `j`'s draw).
    pub fn apply(&mut self, batch: &[usize]) {
        let d = self.problem.d();
        let n = self.problem.n() as f64;
        for (j, &i) in batch.iter().enumerate() {
            self.problem.grad_component_into(i, &self.x, &mut self.grads[j * d..(j + 1) * d]);
        }
        let mut step = vec![0.0; d];
        for (j, &i) in batch.iter().enumerate() {
            let g = &self.grads[j * d..(j + 1) * d];
            if self.variance_reduced {
                let a = &self.alpha[i * d..(i + 1) * d];
                for k in 0..d {
                    step[k] += g[k] - a[k] + self.alpha_bar[k];
                }
            } else {
                axpy(1.0, g, &mut step);
            }
        }
        axpy(-self.eta, &step, &mut self.x);
        if self.variance_reduced {
            // Sequential refresh: a repeated index keeps the last write.
            for (j, &i) in batch.iter().enumerate() {
                let g = &self.grads[j * d..(j + 1) * d];
                let a = &mut self.alpha[i * d..(i + 1) * d];
                for ((bar, a), g) in self.alpha_bar.iter_mut().zip(a.iter_mut()).zip(g) {
                    *bar += (g - *a) / n;
                    *a = *g;
                }
            }
        }
    }
}

impl Simulated for Minibatch<'_> {
    fn step(&mut self) -> Option<usize> {
        let batch = self.draw_batch();
        self.apply(&batch);
        None
    }

    fn iterate(&self) -> &[f64] {
        &self.x
    }

    fn grads_per_step(&self) -> usize {
        self.partition.m()
    }
}

/// Step size `1 / (2 m L_f + 3 L)` for minibatch SAGA.
pub fn minibatch_step_size(c: &Constants, m: usize) -> f64 {
    1.0 / (2.0 * m as f64 * c.l_f + 3.0 * c.l)
}

/// Per-round contraction `min(mu m / (4 m L_f + 12 L), m / (3n))`.
pub fn minibatch_gamma(c: &Constants, m: usize) -> f64 {
    let mf = m as f64;
    (c.mu * mf / (4.0 * mf * c.l_f + 12.0 * c.l)).min(mf / (3.0 * c.n as f64))
}

/// `(3n/m + 12L/(m mu) + 4 L_f/mu) log(phi0 / eps)`.
pub fn minibatch_iteration_bound(c: &Constants, m: usize, phi0: f64, eps: f64) -> f64 {
    let mf = m as f64;
    (3.0 * c.n as f64 / mf + 12.0 * c.l / (mf * c.mu) + 4.0 * c.l_f / c.mu) * (phi0 / eps).ln()
}

/// `|x - x*|^2 + 4 n eta^2 mean_i |alpha_i - grad f_i(x*)|^2`.
pub fn minibatch_potential(problem: &Problem, x: &[f64], alpha: &[f64], eta: f64) -> f64 {
    let n = problem.n() as f64;
    let spread = dist_sq(alpha, &problem.grads_at_optimum()) / n;
    dist_sq(x, problem.x_star()) + 4.0 * n * eta * eta * spread
}

/// Algorithms the harness and runtime know by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Adsaga,
    /// ADSAGA run as if rates were uniform (no `u_j` weighting).
    AdsagaVanilla,
    Asaga,
    Iag,
    #[serde(alias = "sgd")]
    AsyncSgd,
    MinibatchSaga,
    MinibatchSgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Adsaga,
        Algorithm::AdsagaVanilla,
        Algorithm::Asaga,
        Algorithm::Iag,
        Algorithm::AsyncSgd,
        Algorithm::MinibatchSaga,
        Algorithm::MinibatchSgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Adsaga => "adsaga",
            Algorithm::AdsagaVanilla => "adsaga_vanilla",
            Algorithm::Asaga => "asaga",
            Algorithm::Iag => "iag",
            Algorithm::AsyncSgd => "async_sgd",
            Algorithm::MinibatchSaga => "minibatch_saga",
            Algorithm::MinibatchSgd => "minibatch_sgd",
        }
    }

    pub fn is_synchronous(self) -> bool {
        matches!(self, Algorithm::MinibatchSaga | Algorithm::MinibatchSgd)
    }

    /// Builds a seeded simulator. `model` drives machine selection for the
    /// asynchronous algorithms and is ignored by the synchronous ones.
    pub fn simulator<'a>(
        self,
        problem: &'a Problem,
        partition: &'a Partition,
        model: DelayModel,
        eta: f64,
        x0: &[f64],
        seed: u64,
    ) -> Result<Box<dyn Simulated + Send + 'a>, AdsagaError> {
        Ok(match self {
            Algorithm::Adsaga => Box::new(AdsagaSim::new(problem, partition, model, eta, x0, seed)?),
            Algorithm::AdsagaVanilla => {
                Box::new(AdsagaSim::with_update_model(problem, partition, model, uniform_like(partition)?, eta, x0, seed)?)
            }
            Algorithm::Asaga => {
                check_shapes(problem, partition, Some(&model), x0)?;
                Box::new(Asaga::new(problem, model, eta, x0, seed)?)
            }
            Algorithm::Iag => Box::new(Iag::new(problem, partition, model, eta, x0, seed)?),
            Algorithm::AsyncSgd => Box::new(AsyncSgd::new(problem, partition, model, eta, x0, seed)?),
            Algorithm::MinibatchSaga => Box::new(Minibatch::saga(problem, partition, DataMode::Distributed, eta, x0, seed)?),
            Algorithm::MinibatchSgd => Box::new(Minibatch::sgd(problem, partition, DataMode::Distributed, eta, x0, seed)?),
        })
    }
}

fn uniform_like(partition: &Partition) -> Result<DelayModel, AdsagaError> {
    DelayModel::uniform(partition.m()).map_err(|e| AdsagaError::Shape(e.to_string()))
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "sgd" {
            return Ok(Algorithm::AsyncSgd);
        }
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?}"))
    }
}
