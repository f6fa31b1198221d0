//! Run loop shared by every simulated algorithm, and the trace it records.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::linalg::dist_sq;
use crate::problem::Problem;

/// A seeded, single-threaded optimizer simulation.
pub trait Simulated {
    /// Advances one iteration; returns the machine that delivered the update,
    /// or `None` for synchronous rounds.
    fn step(&mut self) -> Option<usize>;

    fn iterate(&self) -> &[f64];

    /// Component-gradient evaluations per iteration (for epoch accounting).
    fn grads_per_step(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `|x - x*|^2`
    #[default]
    DistSq,
    /// `f(x) - f(x*)`
    Gap,
}

impl Metric {
    pub fn eval(self, problem: &Problem, x: &[f64]) -> f64 {
        match self {
            Metric::DistSq => dist_sq(x, problem.x_star()),
            Metric::Gap => problem.objective_gap(x),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dist_sq" => Ok(Metric::DistSq),
            "gap" => Ok(Metric::Gap),
            other => Err(format!("unknown metric {other:?} (expected dist_sq or gap)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// A row after every iteration.
    Iteration,
    /// A row every `n` component-gradient evaluations.
    #[default]
    Epoch,
    /// Only the first and last rows.
    Endpoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub threshold: f64,
    pub metric: Metric,
    pub max_iterations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    pub machine: Option<usize>,
    pub dist_sq: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    /// First iteration whose metric is at or below the threshold.
    pub converged_at: Option<u64>,
    pub iterations: u64,
    pub diverged: bool,
    pub final_metric: f64,
}

impl Trace {
    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }

    /// CSV with header `iteration,machine,dist_sq,gap`; floats carry 17
    /// significant digits and synchronous rounds leave `machine` empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iteration,machine,dist_sq,gap")?;
        for r in &self.rows {
            let machine = r.machine.map(|j| j.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{:.16e},{:.16e}", r.iteration, machine, r.dist_sq, r.gap)?;
        }
        Ok(())
    }

    /// One JSON object per row.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Iterates until the metric first reaches `stop.threshold`, the budget runs
/// out, or the iterate blows up (non-finite, or `1e12` times the starting metric).
pub fn run<S: Simulated + ?Sized>(sim: &mut S, problem: &Problem, stop: StopRule, granularity: Granularity) -> Trace {
    let row = |iteration, machine, x: &[f64]| TraceRow {
        iteration,
        machine,
        dist_sq: dist_sq(x, problem.x_star()),
        gap: problem.objective_gap(x),
    };
    let mut rows = vec![row(0, None, sim.iterate())];
    let start = stop.metric.eval(problem, sim.iterate());
    let blowup = 1e12 * start.max(1.0);
    let mut metric = start;
    let mut converged_at = (metric <= stop.threshold).then_some(0);
    let mut diverged = false;
    let epoch = problem.n();
    let mut grads = 0usize;
    let mut k = 0u64;
    while converged_at.is_none() && k < stop.max_iterations {
        let machine = sim.step();
        k += 1;
        grads += sim.grads_per_step();
        metric = stop.metric.eval(problem, sim.iterate());
        if metric <= stop.threshold {
            converged_at = Some(k);
        } else if !metric.is_finite() || metric > blowup {
            diverged = true;
        }
        let log = match granularity {
            Granularity::Iteration => true,
            Granularity::Epoch => grads >= epoch,
            Granularity::Endpoints => false,
        };
        if log || converged_at.is_some() || diverged {
            if granularity == Granularity::Epoch {
                grads %= epoch;
            }
            rows.push(row(k, machine, sim.iterate()));
        }
        if diverged {
            break;
        }
    }
    if rows.last().map(|r| r.iteration) != Some(k) {
        rows.push(row(k, None, sim.iterate()));
    }
    Trace { rows, converged_at, iterations: k, diverged, final_metric: metric }
}

/// First logged iteration at which `metric <= threshold`.
pub fn iterations_to_threshold(trace: &Trace, threshold: f64, metric: Metric) -> Option<u64> {
    trace
        .rows
        .iter()
        .find(|r| match metric {
            Metric::DistSq => r.dist_sq <= threshold,
            Metric::Gap => r.gap <= threshold,
        })
        .map(|r| r.iteration)
}
