//! Loopback runs with the server and every worker on threads of this process.

use std::io::{self, Write};
use std::net::{Ipv4Addr, TcpListener};
use std::thread;
use std::time::Duration;

use adsaga_core::delay::estimate_rates;
use adsaga_core::{partition, Algorithm, DelayModel, Partition, Problem};
use serde::{Deserialize, Serialize};

use crate::ps::{serve, PsConfig, PsReport, StopCriterion};
use crate::worker::{connect, run_worker, WorkerConfig, WorkerReport};
use crate::{roles, RuntimeError};

#[derive(Debug, Clone)]
pub struct LocalRun<'a> {
    pub problem: &'a Problem,
    pub partition: &'a Partition,
    pub algorithm: Algorithm,
    pub eta: f64,
    /// Rates assumed by ADSAGA's step weights; `None` for uniform.
    pub rates: Option<Vec<f64>>,
    /// Per-worker injected compute time; empty for none.
    pub work_delays: Vec<Duration>,
    pub stop: StopCriterion,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub record: bool,
    pub timeout: Duration,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalReport {
    pub ps: PsReport,
    pub workers: Vec<WorkerReport>,
}

impl LocalReport {
    /// Worker draw sequences indexed by worker id.
    pub fn draws(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.workers.len()];
        for w in &self.workers {
            out[w.id as usize] = w.draws.clone();
        }
        out
    }
}

pub fn run_local(run: &LocalRun<'_>) -> Result<LocalReport, RuntimeError> {
    let m = run.partition.m();
    let weights = run
        .rates
        .as_deref()
        .map(DelayModel::from_rates)
        .transpose()
        .map_err(|e| RuntimeError::Protocol(e.to_string()))?;
    let (rule, payload, selection) = roles(run.algorithm, m, weights.as_ref())?;
    let config = PsConfig {
        m,
        eta: run.eta,
        rule,
        x0: run.x0.clone(),
        stop: run.stop,
        record_trajectory: run.record,
        timeout: run.timeout,
    };
    let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0))?;
    let addr = listener.local_addr()?;
    thread::scope(|scope| {
        let server = scope.spawn(|| serve(&listener, run.problem, &config, None));
        let workers: Vec<_> = (0..m)
            .map(|j| {
                let wc = WorkerConfig {
                    id: j as u32,
                    seed: run.seed,
                    payload,
                    selection,
                    work_delay: run.work_delays.get(j).copied().unwrap_or_default(),
                    record_gradients: run.record,
                };
                let set = run.partition.set(j);
                scope.spawn(move || {
                    let stream = connect(addr, Duration::from_secs(10))?;
                    run_worker(stream, run.problem, set, &wc)
                })
            })
            .collect();
        let ps = server.join().expect("server thread panicked")?;
        let workers = workers
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LocalReport { ps, workers })
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WallclockRow {
    pub m: usize,
    pub algorithm: Algorithm,
    pub seconds_to_threshold: Option<f64>,
    pub updates: u64,
    pub counts: Vec<u64>,
    /// Selection probabilities estimated from `counts`.
    pub estimated_p: Option<Vec<f64>>,
    /// Absent when the run failed.
    pub final_metric: Option<f64>,
    pub error: Option<String>,
}

pub struct WallclockSweep<'a> {
    pub problem: &'a Problem,
    pub ms: Vec<usize>,
    pub algorithms: Vec<(Algorithm, f64)>,
    /// Delay for each worker id, given `m`.
    pub delays: &'a dyn Fn(usize) -> Vec<Duration>,
    pub stop: StopCriterion,
    pub seed: u64,
    pub timeout: Duration,
}

/// One row per `(m, algorithm)`; failures are recorded in the row.
pub fn measure_wallclock(sweep: &WallclockSweep<'_>) -> Vec<WallclockRow> {
    let mut rows = Vec::new();
    for &m in &sweep.ms {
        let part = match partition(sweep.problem.n(), m, sweep.seed) {
            Ok(p) => p,
            Err(e) => {
                for &(algorithm, _) in &sweep.algorithms {
                    rows.push(failed_row(m, algorithm, e.to_string()));
                }
                continue;
            }
        };
        for &(algorithm, eta) in &sweep.algorithms {
            let run = LocalRun {
                problem: sweep.problem,
                partition: &part,
                algorithm,
                eta,
                rates: None,
                work_delays: (sweep.delays)(m),
                stop: sweep.stop,
                seed: sweep.seed,
                x0: vec![0.0; sweep.problem.d()],
                record: false,
                timeout: sweep.timeout,
            };
            rows.push(match run_local(&run) {
                Ok(r) => WallclockRow {
                    m,
                    algorithm,
                    seconds_to_threshold: r.ps.time_to_threshold,
                    updates: r.ps.updates,
                    estimated_p: estimate_rates(&r.ps.counts).ok().map(|p| p.probabilities().to_vec()),
                    counts: r.ps.counts,
                    final_metric: Some(r.ps.final_metric),
                    error: None,
                },
                Err(e) => failed_row(m, algorithm, e.to_string()),
            });
        }
    }
    rows
}

fn failed_row(m: usize, algorithm: Algorithm, error: String) -> WallclockRow {
    WallclockRow {
        m,
        algorithm,
        seconds_to_threshold: None,
        updates: 0,
        counts: Vec::new(),
        estimated_p: None,
        final_metric: None,
        error: Some(error),
    }
}

/// CSV `m,algorithm,wallclock_s,converged,updates,final_metric,error`.
pub fn write_wallclock_csv<W: Write>(rows: &[WallclockRow], mut w: W) -> io::Result<()> {
    writeln!(w, "m,algorithm,wallclock_s,converged,updates,final_metric,error")?;
    for r in rows {
        let secs = r.seconds_to_threshold.map(|s| format!("{s:.6}")).unwrap_or_default();
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let metric = r.final_metric.map(|v| format!("{v:.16e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.m,
            r.algorithm,
            secs,
            r.seconds_to_threshold.is_some(),
            r.updates,
            metric,
            err
        )?;
    }
    Ok(())
}
