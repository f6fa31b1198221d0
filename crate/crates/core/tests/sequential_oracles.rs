//! With one machine every asynchronous method collapses to its sequential
//! counterpart with a single step of staleness.

use adsaga_core::adsaga::{streams, AdsagaSim};
use adsaga_core::baselines::{Asaga, AsyncSgd, DataMode, Minibatch};
use adsaga_core::sim::{run, Granularity, Metric, Simulated, StopRule};
use adsaga_core::linalg::{axpy, dist_sq};
use adsaga_core::{generate_least_squares, partition, DelayModel, Problem};
use rand::Rng;

fn saga_direction(grad: &[f64], alpha: &[Vec<f64>], i: usize) -> Vec<f64> {
    let n = alpha.len() as f64;
    (0..grad.len())
        .map(|k| grad[k] - alpha[i][k] + alpha.iter().map(|a| a[k]).sum::<f64>() / n)
        .collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64, step: usize) {
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "step {step}: {x} vs {y}");
    }
}

/// SAGA whose step at iteration `k` uses the gradient drawn at iteration `k-1`.
struct DelayedSaga<'a> {
    p: &'a Problem,
    x: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    pending: (usize, Vec<f64>),
}

impl<'a> DelayedSaga<'a> {
    fn new(p: &'a Problem, x0: &[f64], first: usize) -> Self {
        DelayedSaga { p, x: x0.to_vec(), alpha: vec![vec![0.0; p.d()]; p.n()], pending: (first, vec![0.0; p.d()]) }
    }

    fn step(&mut self, i: usize) {
        let (ip, gp) = self.pending.clone();
        let dir = saga_direction(&gp, &self.alpha, ip);
        self.alpha[ip] = gp;
        self.pending = (i, self.p.grad_component(i, &self.x));
        for (x, v) in self.x.iter_mut().zip(dir) {
            *x -= 0.05 * v;
        }
    }
}

#[test]
fn single_machine_adsaga_is_delayed_saga() {
    let p = generate_least_squares(40, 6, 1.0, 4).unwrap();
    let part = partition(40, 1, 4).unwrap();
    let x0 = vec![1.0; 6];
    let mut sim = AdsagaSim::new(&p, &part, DelayModel::uniform(1).unwrap(), 0.05, &x0, 19).unwrap();
    let mut oracle = DelayedSaga::new(&p, &x0, sim.state().workers[0].last_index);
    for k in 0..1000 {
        let (j, i) = sim.next_draw();
        assert_eq!(j, 0);
        sim.apply(j, i);
        oracle.step(i);
        assert_close(sim.iterate(), &oracle.x, 1e-12, k);
    }
}

#[test]
fn single_machine_adsaga_tracks_plain_saga_iteration_count() {
    let p = generate_least_squares(120, 60, 1.0, 6).unwrap();
    let part = partition(120, 1, 6).unwrap();
    let x0 = vec![0.0; 60];
    let eta = 0.2;
    let stop = StopRule { threshold: 0.1, metric: Metric::DistSq, max_iterations: 2_000_000 };
    let mut sim = AdsagaSim::new(&p, &part, DelayModel::uniform(1).unwrap(), eta, &x0, 2).unwrap();
    let delayed = run(&mut sim, &p, stop, Granularity::Endpoints).converged_at.unwrap() as f64;

    let mut functions = streams::rng(2, streams::FUNCTIONS);
    let mut x = x0.clone();
    let mut alpha = vec![vec![0.0; 60]; 120];
    let mut k = 0u64;
    while dist_sq(&x, p.x_star()) > 0.1 {
        let i = functions.random_range(0..120);
        let g = p.grad_component(i, &x);
        let dir = saga_direction(&g, &alpha, i);
        alpha[i] = g;
        axpy(-eta, &dir, &mut x);
        k += 1;
    }
    let ratio = delayed / k as f64;
    assert!((ratio - 1.0).abs() <= 0.05, "delayed {delayed} vs sequential {k}");
}

#[test]
fn single_machine_asaga_is_stale_saga() {
    let p = generate_least_squares(30, 5, 1.0, 8).unwrap();
    let x0 = vec![-0.5; 5];
    let mut asaga = Asaga::new(&p, DelayModel::uniform(1).unwrap(), 0.05, &x0, 3).unwrap();
    let mut functions = streams::rng(3, streams::FUNCTIONS);
    let mut x = x0.clone();
    let mut prev = x0.clone();
    let mut alpha = vec![vec![0.0; 5]; 30];
    for k in 0..1000 {
        asaga.step();
        let i = functions.random_range(0..30);
        let g = p.grad_component(i, &prev);
        let dir = saga_direction(&g, &alpha, i);
        alpha[i] = g;
        prev = x.clone();
        axpy(-0.05, &dir, &mut x);
        assert_close(&asaga.x, &x, 1e-12, k);
    }
}

#[test]
fn single_machine_sgd_is_stale_sgd() {
    let p = generate_least_squares(30, 5, 1.0, 8).unwrap();
    let part = partition(30, 1, 0).unwrap();
    let x0 = vec![0.5; 5];
    let mut sgd = AsyncSgd::new(&p, &part, DelayModel::uniform(1).unwrap(), 0.03, &x0, 4).unwrap();
    let mut functions = streams::rng(4, streams::FUNCTIONS);
    let (mut x, mut prev) = (x0.clone(), x0.clone());
    for k in 0..1000 {
        sgd.step();
        let i = functions.random_range(0..30);
        let g = p.grad_component(i, &prev);
        prev = x.clone();
        axpy(-0.03, &g, &mut x);
        assert_close(&sgd.x, &x, 1e-12, k);
    }
}

#[test]
fn single_machine_shared_minibatch_is_saga() {
    let p = generate_least_squares(30, 5, 1.0, 8).unwrap();
    let part = partition(30, 1, 0).unwrap();
    let x0 = vec![0.5; 5];
    let mut mb = Minibatch::saga(&p, &part, DataMode::Shared, 0.05, &x0, 6).unwrap();
    let mut functions = streams::rng(6, streams::FUNCTIONS);
    let mut x = x0.clone();
    let mut alpha = vec![vec![0.0; 5]; 30];
    for k in 0..500 {
        mb.step();
        let i = functions.random_range(0..30);
        let g = p.grad_component(i, &x);
        let dir = saga_direction(&g, &alpha, i);
        alpha[i] = g;
        axpy(-0.05, &dir, &mut x);
        assert_close(&mb.x, &x, 1e-12, k);
    }
}
