use adsaga_core::baselines::{
    minibatch_gamma, minibatch_potential, minibatch_step_size, Asaga, AsyncSgd, DataMode, Iag, Minibatch,
};
use adsaga_core::linalg::norm_sq;
use adsaga_core::sim::{run, Granularity, Metric, Simulated, StopRule};
use adsaga_core::{generate_least_squares, partition, Algorithm, Constants, DelayModel, Partition, Problem};
use proptest::prelude::*;

fn mean_rows(table: &[f64], d: usize) -> Vec<f64> {
    let n = table.len() / d;
    (0..d).map(|k| (0..n).map(|i| table[i * d + k]).sum::<f64>() / n as f64).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = 1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

fn fill_alpha_at_optimum(p: &Problem) -> Vec<f64> {
    p.grads_at_optimum()
}

#[test]
fn asaga_direction_is_unbiased() {
    let p = generate_least_squares(6, 3, 1.0, 2).unwrap();
    let mut asaga = Asaga::new(&p, DelayModel::uniform(2).unwrap(), 0.1, &[1.0, -1.0, 0.5], 7).unwrap();
    for _ in 0..25 {
        asaga.step();
    }
    for j in 0..2 {
        let mut mean = vec![0.0; 3];
        for i in 0..6 {
            for (m, u) in mean.iter_mut().zip(asaga.update_direction(j, i)) {
                *m += u / 6.0;
            }
        }
        let stale = asaga.x_local[j * 3..(j + 1) * 3].to_vec();
        assert!(close(&mean, &p.grad_full(&stale), 1e-12));
    }
}

#[test]
fn fixed_points_at_optimum() {
    let p = generate_least_squares(12, 3, 1.0, 4).unwrap();
    let part = partition(12, 3, 4).unwrap();
    let model = DelayModel::uniform(3).unwrap();
    let star = p.x_star().to_vec();

    let mut asaga = Asaga::new(&p, model.clone(), 0.2, &star, 1).unwrap();
    asaga.alpha = fill_alpha_at_optimum(&p);
    asaga.alpha_bar = mean_rows(&asaga.alpha, 3);
    let mut iag = Iag::new(&p, &part, model, 0.2, &star, 1).unwrap();
    iag.alpha = fill_alpha_at_optimum(&p);
    iag.alpha_sum = mean_rows(&iag.alpha, 3).iter().map(|v| v * 12.0).collect();
    let mut mb = Minibatch::saga(&p, &part, DataMode::Shared, 0.2, &star, 1).unwrap();
    mb.alpha = fill_alpha_at_optimum(&p);
    mb.alpha_bar = mean_rows(&mb.alpha, 3);
    for _ in 0..50 {
        asaga.step();
        iag.step();
        mb.step();
        assert!(close(&asaga.x, &star, 1e-12));
        assert!(close(&iag.x, &star, 1e-12));
        assert!(close(&mb.x, &star, 1e-12));
    }
}

fn enumerate_batches(part: &Partition, mode: DataMode, n: usize) -> Vec<Vec<usize>> {
    let m = part.m();
    let choices: Vec<Vec<usize>> = (0..m)
        .map(|j| match mode {
            DataMode::Shared => (0..n).collect(),
            DataMode::Distributed => part.set(j).to_vec(),
        })
        .collect();
    let mut out = vec![vec![]];
    for c in &choices {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                c.iter().map(move |&i| {
                    let mut b = prefix.clone();
                    b.push(i);
                    b
                })
            })
            .collect();
    }
    out
}

#[test]
fn minibatch_expected_step_is_scaled_gradient() {
    let p = generate_least_squares(4, 2, 1.0, 3).unwrap();
    let part = partition(4, 2, 3).unwrap();
    for mode in [DataMode::Distributed, DataMode::Shared] {
        for vr in [true, false] {
            let build = |eta| {
                if vr {
                    Minibatch::saga(&p, &part, mode, eta, &[0.4, -0.8], 2).unwrap()
                } else {
                    Minibatch::sgd(&p, &part, mode, eta, &[0.4, -0.8], 2).unwrap()
                }
            };
            let mut base = build(0.1);
            for _ in 0..5 {
                base.step();
            }
            let batches = enumerate_batches(&part, mode, 4);
            let mut mean = vec![0.0; 2];
            for b in &batches {
                let mut next = base.clone();
                next.apply(b);
                for (m, x) in mean.iter_mut().zip(&next.x) {
                    *m += x / batches.len() as f64;
                }
            }
            let g = p.grad_full(&base.x);
            let expected: Vec<f64> = base.x.iter().zip(&g).map(|(x, g)| x - 0.1 * 2.0 * g).collect();
            assert!(close(&mean, &expected, 1e-12), "{mode:?} vr={vr}: {mean:?} vs {expected:?}");
        }
    }
}

#[test]
fn full_participation_sgd_is_gradient_descent() {
    let p = generate_least_squares(6, 2, 1.0, 1).unwrap();
    let part = partition(6, 6, 1).unwrap();
    let mut mb = Minibatch::sgd(&p, &part, DataMode::Distributed, 0.05, &[1.0, 1.0], 0).unwrap();
    let x0 = mb.x.clone();
    mb.step();
    let g = p.grad_full(&x0);
    let expected: Vec<f64> = x0.iter().zip(&g).map(|(x, g)| x - 0.05 * 6.0 * g).collect();
    assert!(close(&mb.x, &expected, 1e-12));
}

#[test]
fn step_size_formula() {
    let c = Constants { n: 120, l: 4.0, l_f: 1.0, mu: 0.1, sigma_sq: 0.0 };
    assert_eq!(minibatch_step_size(&c, 10), 0.03125);
}

fn stop(budget: u64) -> StopRule {
    StopRule { threshold: 0.0, metric: Metric::Gap, max_iterations: budget }
}

#[test]
fn iag_converges_linearly() {
    let p = generate_least_squares(24, 8, 1.0, 2).unwrap();
    let part = partition(24, 4, 2).unwrap();
    let mut iag = Iag::new(&p, &part, DelayModel::uniform(4).unwrap(), 0.05, &[1.0; 8], 3).unwrap();
    let trace = run(&mut iag, &p, stop(2400), Granularity::Iteration);
    let at = |k: usize| trace.rows[k].gap;
    assert!(at(2400) < at(240));
    assert!(at(2400) < 1e-3 * at(0));
}

#[test]
fn sgd_stalls_above_variance_reduced_methods() {
    let p = generate_least_squares(120, 60, 1.0, 1).unwrap();
    let part = partition(120, 10, 1).unwrap();
    let model = DelayModel::uniform(10).unwrap();
    let budget = 120 * 400;
    let final_gap = |alg: Algorithm| {
        let mut sim = alg.simulator(&p, &part, model.clone(), 0.1, &vec![0.0; 60], 5).unwrap();
        run(sim.as_mut(), &p, stop(budget), Granularity::Endpoints).rows.last().unwrap().gap
    };
    let sgd = final_gap(Algorithm::AsyncSgd);
    for alg in [Algorithm::Adsaga, Algorithm::Asaga, Algorithm::Iag] {
        let vr = final_gap(alg);
        assert!(sgd > 10.0 * vr, "{alg}: sgd {sgd:e} vs {vr:e}");
    }
}

#[test]
fn noiseless_sgd_converges() {
    let p = generate_least_squares(40, 5, 0.0, 2).unwrap();
    let part = partition(40, 4, 2).unwrap();
    let mut sgd = AsyncSgd::new(&p, &part, DelayModel::uniform(4).unwrap(), 0.2, &[1.0; 5], 1).unwrap();
    let trace = run(&mut sgd, &p, StopRule { threshold: 1e-12, metric: Metric::DistSq, max_iterations: 200_000 }, Granularity::Epoch);
    assert!(trace.converged());
}

/// One minibatch round from a fixed state contracts the minibatch potential by
/// at least `1 - gamma` on average (500 Monte Carlo trials, 3 standard errors).
#[test]
fn minibatch_potential_contracts() {
    let p = generate_least_squares(120, 60, 1.0, 7).unwrap();
    let part = partition(120, 10, 7).unwrap();
    let c = p.constants();
    let eta = minibatch_step_size(&c, 10);
    let gamma = minibatch_gamma(&c, 10);
    let mut base = Minibatch::saga(&p, &part, DataMode::Distributed, eta, &vec![0.5; 60], 0).unwrap();
    for _ in 0..30 {
        base.step();
    }
    let phi = minibatch_potential(&p, &base.x, &base.alpha, eta);
    let samples: Vec<f64> = (0..500u64)
        .map(|t| {
            let mut trial = Minibatch::saga(&p, &part, DataMode::Distributed, eta, &base.x, 1000 + t).unwrap();
            trial.alpha = base.alpha.clone();
            trial.alpha_bar = base.alpha_bar.clone();
            trial.step();
            minibatch_potential(&p, &trial.x, &trial.alpha, eta)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / 500.0;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 499.0;
    let se = (var / 500.0).sqrt();
    assert!(mean <= (1.0 - gamma) * phi + 3.0 * se, "{mean} vs {}", (1.0 - gamma) * phi);
}

#[derive(Debug, Clone, Copy)]
enum Which {
    Asaga,
    Iag,
    Shared,
    Distributed,
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregates_stay_consistent(seed in any::<u64>(), steps in 1usize..300, which in prop_oneof![
        Just(Which::Asaga), Just(Which::Iag), Just(Which::Shared), Just(Which::Distributed)
    ], rates in prop::collection::vec(0.2f64..3.0, 3)) {
        let p = generate_least_squares(24, 4, 1.0, seed).unwrap();
        let part = partition(24, 3, seed).unwrap();
        let model = DelayModel::from_rates(&rates).unwrap();
        let x0 = [0.3, -0.2, 0.1, 1.0];
        let (alpha, agg, scale) = match which {
            Which::Asaga => {
                let mut s = Asaga::new(&p, model, 0.05, &x0, seed).unwrap();
                (0..steps).for_each(|_| { s.step(); });
                (s.alpha.clone(), s.alpha_bar.clone(), 1.0)
            }
            Which::Iag => {
                let mut s = Iag::new(&p, &part, model, 0.05, &x0, seed).unwrap();
                (0..steps).for_each(|_| { s.step(); });
                (s.alpha.clone(), s.alpha_sum.clone(), 24.0)
            }
            Which::Shared | Which::Distributed => {
                let mode = if matches!(which, Which::Shared) { DataMode::Shared } else { DataMode::Distributed };
                let mut s = Minibatch::saga(&p, &part, mode, 0.02, &x0, seed).unwrap();
                (0..steps / 3 + 1).for_each(|_| { s.step(); });
                (s.alpha.clone(), s.alpha_bar.clone(), 1.0)
            }
        };
        let expected: Vec<f64> = mean_rows(&alpha, 4).iter().map(|v| v * scale).collect();
        prop_assert!(close(&agg, &expected, 1e-9), "{:?} vs {:?}", agg, expected);
        prop_assert!(norm_sq(&agg).is_finite());
    }
}
