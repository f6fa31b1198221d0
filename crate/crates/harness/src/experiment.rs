//! Seeded runs, step-size grid search and multi-seed aggregation.

use std::cmp::Ordering;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use adsaga_core::problem::ProblemMetadata;
use adsaga_core::sim::run;
use adsaga_core::{partition, Algorithm, Granularity, Metric, Problem, StopRule, Trace};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Iterations to reach the threshold; `None` if it was never reached.
    pub iterations: Option<u64>,
    pub iterations_run: u64,
    /// Absent when the run failed or the metric was not finite.
    pub final_metric: Option<f64>,
    pub diverged: bool,
    pub error: Option<String>,
}

impl SeedOutcome {
    fn failed(seed: u64, error: String) -> Self {
        SeedOutcome { seed, iterations: None, iterations_run: 0, final_metric: None, diverged: false, error: Some(error) }
    }
}

/// Mean and standard error over the converged seeds only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
    pub converged: usize,
    pub non_converged: usize,
}

impl Aggregate {
    pub fn of(outcomes: &[SeedOutcome]) -> Self {
        let done: Vec<f64> = outcomes.iter().filter_map(|o| o.iterations).map(|k| k as f64).collect();
        let k = done.len();
        let mean = (k > 0).then(|| done.iter().sum::<f64>() / k as f64);
        let stderr = mean.filter(|_| k > 1).map(|mu| {
            let var = done.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        });
        Aggregate { mean, stderr, converged: k, non_converged: outcomes.len() - k }
    }

    /// Mean that counts any non-converged seed as infinitely slow.
    pub fn strict_mean(&self) -> f64 {
        match self.mean {
            Some(m) if self.non_converged == 0 => m,
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub eta: f64,
    pub aggregate: Aggregate,
    /// Mean final metric over seeds that ran; absent if any blew up.
    pub mean_final_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub best_eta: f64,
    pub best_index: usize,
    pub at_endpoint: bool,
    pub points: Vec<GridPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub algorithm: Algorithm,
    pub m: usize,
    pub metric: Metric,
    pub threshold: f64,
    pub eta: f64,
    pub problem: ProblemMetadata,
    pub grid: Option<GridReport>,
    pub seeds: Vec<SeedOutcome>,
    pub aggregate: Aggregate,
    pub aggregation_note: String,
    /// Trace files relative to the output directory.
    pub traces: Vec<String>,
}

fn stop_rule(config: &RunConfig) -> StopRule {
    StopRule { threshold: config.threshold, metric: config.metric, max_iterations: config.max_iterations }
}

/// One seed at one step size. The seed fixes both the partition and the
/// simulator's random streams.
pub fn run_seed(problem: &Problem, config: &RunConfig, eta: f64, seed: u64, granularity: Granularity) -> Result<Trace, HarnessError> {
    let part = partition(problem.n(), config.m, seed)?;
    let model = config.delay_model()?;
    let x0 = vec![0.0; problem.d()];
    let mut sim = config.algorithm.simulator(problem, &part, model, eta, &x0, seed)?;
    Ok(run(sim.as_mut(), problem, stop_rule(config), granularity))
}

fn outcome(seed: u64, result: Result<&Trace, &HarnessError>) -> SeedOutcome {
    match result {
        Ok(t) => SeedOutcome {
            seed,
            iterations: t.converged_at,
            iterations_run: t.iterations,
            final_metric: t.final_metric.is_finite().then_some(t.final_metric),
            diverged: t.diverged,
            error: None,
        },
        Err(e) => SeedOutcome::failed(seed, e.to_string()),
    }
}

/// Runs every seed at `eta`, concurrently; failures become outcomes.
pub fn run_seeds(problem: &Problem, config: &RunConfig, eta: f64, granularity: Granularity) -> Vec<(SeedOutcome, Option<Trace>)> {
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            let r = run_seed(problem, config, eta, seed, granularity);
            (outcome(seed, r.as_ref()), r.ok())
        })
        .collect()
}

/// Orders grid points: fewest non-converged seeds, then smallest mean
/// iterations, then smallest mean final metric; ties go to the smaller step.
fn rank_key(p: &GridPoint) -> (usize, f64, f64, f64) {
    let mean = p.aggregate.mean.unwrap_or(f64::INFINITY);
    let fin = p.mean_final_metric.unwrap_or(f64::INFINITY);
    (p.aggregate.non_converged, mean, fin, p.eta)
}

fn compare(a: &GridPoint, b: &GridPoint) -> Ordering {
    let (ka, kb) = (rank_key(a), rank_key(b));
    ka.0.cmp(&kb.0)
        .then(ka.1.total_cmp(&kb.1))
        .then(ka.2.total_cmp(&kb.2))
        .then(ka.3.total_cmp(&kb.3))
}

/// Evaluates every step size of `config.grid` over every seed.
pub fn grid_search(problem: &Problem, config: &RunConfig) -> Result<GridReport, HarnessError> {
    let grid = config
        .grid
        .as_ref()
        .ok_or_else(|| HarnessError::Config("grid search needs a `grid`".into()))?
        .resolve(problem.constants().l);
    let cells: Vec<(usize, u64)> = (0..grid.len()).flat_map(|g| config.seeds.iter().map(move |&s| (g, s))).collect();
    let outcomes: Vec<(usize, SeedOutcome)> = cells
        .par_iter()
        .map(|&(g, seed)| (g, outcome(seed, run_seed(problem, config, grid[g], seed, Granularity::Endpoints).as_ref())))
        .collect();
    let points: Vec<GridPoint> = grid
        .iter()
        .enumerate()
        .map(|(g, &eta)| {
            let mine: Vec<SeedOutcome> = outcomes.iter().filter(|(k, _)| *k == g).map(|(_, o)| o.clone()).collect();
            let ran: Vec<Option<f64>> = mine.iter().filter(|o| o.error.is_none()).map(|o| o.final_metric).collect();
            let blown = mine.iter().any(|o| o.diverged) || ran.iter().any(Option::is_none);
            let mean_final_metric =
                (!ran.is_empty() && !blown).then(|| ran.iter().flatten().sum::<f64>() / ran.len() as f64);
            GridPoint { eta, aggregate: Aggregate::of(&mine), mean_final_metric }
        })
        .collect();
    if points.iter().all(|p| p.aggregate.converged == 0 && p.mean_final_metric.is_none()) {
        return Err(HarnessError::AllDiverged { grid });
    }
    let best_index = (0..points.len()).min_by(|&a, &b| compare(&points[a], &points[b])).expect("non-empty grid");
    let at_endpoint = points.len() > 1 && (best_index == 0 || best_index + 1 == points.len());
    if at_endpoint {
        warn!(
            "{} at m = {}: best step size {} is at the edge of the grid",
            config.algorithm, config.m, points[best_index].eta
        );
    }
    info!("{} at m = {}: best step size {}", config.algorithm, config.m, points[best_index].eta);
    Ok(GridReport { best_eta: points[best_index].eta, best_index, at_endpoint, points })
}

/// Resolves the step size (searching the grid if one is given), runs every
/// seed and, when `out` is set, writes `manifest.json`, `results.csv` and
/// `traces/seed_<s>.csv` there.
pub fn run_experiment(config: &RunConfig, out: Option<&Path>) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let problem = config.load_problem()?;
    let (eta, grid) = match config.eta {
        Some(eta) => (eta, None),
        None => {
            let report = grid_search(&problem, config)?;
            (report.best_eta, Some(report))
        }
    };
    let runs = run_seeds(&problem, config, eta, config.granularity);
    let seeds: Vec<SeedOutcome> = runs.iter().map(|(o, _)| o.clone()).collect();
    let mut traces = Vec::new();
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("traces"))?;
        for (o, trace) in &runs {
            if let Some(t) = trace {
                let rel = format!("traces/seed_{}.csv", o.seed);
                t.write_csv(BufWriter::new(fs::File::create(dir.join(&rel))?))?;
                traces.push(rel);
            }
        }
    }
    let result = ExperimentResult {
        algorithm: config.algorithm,
        m: config.m,
        metric: config.metric,
        threshold: config.threshold,
        eta,
        problem: problem.metadata(),
        grid,
        aggregate: Aggregate::of(&seeds),
        aggregation_note: "mean and stderr exclude non-converged seeds".into(),
        seeds,
        traces,
    };
    if let Some(dir) = out {
        write_manifest(dir, config, &result)?;
        write_results_csv(dir, &result)?;
    }
    Ok(result)
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub result: ExperimentResult,
}

fn write_manifest(dir: &Path, config: &RunConfig, result: &ExperimentResult) -> Result<(), HarnessError> {
    let m = Manifest { config: config.clone(), result: result.clone() };
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn write_results_csv(dir: &Path, r: &ExperimentResult) -> Result<(), HarnessError> {
    let mut s = String::from("seed,converged,iterations,iterations_run,final_metric,diverged,error\n");
    for o in &r.seeds {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.seed,
            o.iterations.is_some(),
            o.iterations.map(|k| k.to_string()).unwrap_or_default(),
            o.iterations_run,
            o.final_metric.map(|v| format!("{v:.16e}")).unwrap_or_default(),
            o.diverged,
            o.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        ));
    }
    fs::write(dir.join("results.csv"), s)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest, HarnessError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
