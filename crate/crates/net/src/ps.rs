//! Parameter server: one reader thread per worker connection feeds a single
//! loop that applies updates strictly in arrival order.

use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use adsaga_core::adsaga::{server_apply, server_fold};
use adsaga_core::linalg::axpy;
use adsaga_core::sim::Metric;
use adsaga_core::{DelayModel, Problem};
use log::{debug, info, warn};
use serde::Serialize;

use crate::wire::{read_message, write_message, Kind, WireMessage};
use crate::RuntimeError;

/// How the server folds an incoming payload into `x`.
#[derive(Debug, Clone)]
pub enum ServerRule {
    /// Rate-weighted ADSAGA; uniform weights give the vanilla variant.
    Adsaga { weights: DelayModel },
    /// `alpha_sum += h`, `x -= (eta/n) alpha_sum`.
    Iag,
    /// `x -= eta g`.
    Sgd,
    /// Waits for all workers, then `x -= eta (sum_j h_j + m alpha_bar)`.
    MinibatchSaga,
    /// Waits for all workers, then `x -= eta sum_j g_j`.
    MinibatchSgd,
}

impl ServerRule {
    pub fn is_synchronous(&self) -> bool {
        matches!(self, ServerRule::MinibatchSaga | ServerRule::MinibatchSgd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCriterion {
    /// Total UPDATE messages to apply (each worker's initial zero update counts).
    pub max_updates: Option<u64>,
    pub threshold: Option<f64>,
    pub metric: Metric,
}

#[derive(Debug, Clone)]
pub struct PsConfig {
    pub m: usize,
    pub eta: f64,
    pub rule: ServerRule,
    pub x0: Vec<f64>,
    pub stop: StopCriterion,
    /// Keep `x` after every applied update (or round, when synchronous).
    pub record_trajectory: bool,
    /// Wall-clock budget for the whole run.
    pub timeout: Duration,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PsReport {
    pub x: Vec<f64>,
    /// Sender of every applied UPDATE, in application order.
    pub arrivals: Vec<u32>,
    pub trajectory: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
    pub updates: u64,
    pub epochs: u64,
    pub converged: bool,
    /// Seconds from the last HELLO to the epoch check that met the threshold.
    pub time_to_threshold: Option<f64>,
    pub elapsed: f64,
    pub final_metric: f64,
}

#[derive(Serialize)]
struct LogEvent<'a> {
    t_wall: f64,
    event: &'a str,
    machine: Option<u32>,
    epoch: u64,
    metric: Option<f64>,
}

enum Inbound {
    Message(u32, WireMessage),
    Closed(u32),
    Failed(u32, String),
}

struct Server<'a> {
    problem: &'a Problem,
    config: &'a PsConfig,
    x: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `m x d`: `u_j` for ADSAGA; unused otherwise.
    u: Vec<f64>,
    alpha_sum: Vec<f64>,
    pending: Vec<Option<Vec<f64>>>,
}

impl Server<'_> {
    /// Applies one UPDATE; returns whether a PARAM broadcast is due (synchronous rounds).
    fn apply(&mut self, j: usize, h: &[f64], writers: &mut [TcpStream]) -> Result<bool, RuntimeError> {
        let d = self.problem.d();
        let n = self.problem.n() as f64;
        let eta = self.config.eta;
        match &self.config.rule {
            ServerRule::Adsaga { weights } => {
                let ratio = weights.ratio(j);
                let u_j = &mut self.u[j * d..(j + 1) * d];
                server_fold(u_j, h, ratio);
                send(writers, j, &WireMessage::param(self.x.clone()))?;
                server_apply(&mut self.x, &mut self.alpha_bar, u_j, h, eta * ratio, self.config.m as f64 / n, n);
            }
            ServerRule::Iag => {
                send(writers, j, &WireMessage::param(self.x.clone()))?;
                axpy(1.0, h, &mut self.alpha_sum);
                axpy(-eta / n, &self.alpha_sum, &mut self.x);
            }
            ServerRule::Sgd => {
                send(writers, j, &WireMessage::param(self.x.clone()))?;
                axpy(-eta, h, &mut self.x);
            }
            ServerRule::MinibatchSaga | ServerRule::MinibatchSgd => {
                if self.pending[j].replace(h.to_vec()).is_some() {
                    return Err(RuntimeError::Protocol(format!("machine {j} sent two updates in one round")));
                }
                if self.pending.iter().any(Option::is_none) {
                    return Ok(false);
                }
                let batch: Vec<Vec<f64>> = self.pending.iter_mut().map(|p| p.take().expect("complete round")).collect();
                let mut step = vec![0.0; d];
                batch.iter().for_each(|h| axpy(1.0, h, &mut step));
                if matches!(self.config.rule, ServerRule::MinibatchSaga) {
                    axpy(self.config.m as f64, &self.alpha_bar, &mut step);
                    batch.iter().for_each(|h| axpy(1.0 / n, h, &mut self.alpha_bar));
                }
                axpy(-eta, &step, &mut self.x);
                return Ok(true);
            }
        }
        Ok(true)
    }
}

fn send(writers: &mut [TcpStream], j: usize, msg: &WireMessage) -> Result<(), RuntimeError> {
    write_message(&mut writers[j], msg)
        .map_err(|e| RuntimeError::Disconnected { machine: j as u32, reason: e.to_string() })
}

/// Accepts `m` workers on `listener`, runs to the stop criterion, broadcasts
/// STOP and drains the connections. `log` receives one JSON event per line.
pub fn serve(
    listener: &TcpListener,
    problem: &Problem,
    config: &PsConfig,
    mut log: Option<&mut (dyn Write + Send)>,
) -> Result<PsReport, RuntimeError> {
    let (m, d) = (config.m, problem.d());
    if config.x0.len() != d {
        return Err(RuntimeError::Protocol(format!("x0 has {} entries, problem d = {d}", config.x0.len())));
    }
    if let ServerRule::Adsaga { weights } = &config.rule {
        if weights.m() != m {
            return Err(RuntimeError::Protocol(format!("{} rate weights for {m} workers", weights.m())));
        }
    }
    let started = Instant::now();
    let deadline = started + config.timeout;
    let mut emit = |event: &str, machine: Option<u32>, epoch: u64, metric: Option<f64>, t0: Instant| {
        if let Some(w) = log.as_deref_mut() {
            let e = LogEvent { t_wall: t0.elapsed().as_secs_f64(), event, machine, epoch, metric };
            if serde_json::to_writer(&mut *w, &e).and_then(|_| w.write_all(b"\n").map_err(serde_json::Error::io)).is_err() {
                warn!("run log write failed");
            }
        }
    };

    let (tx, rx) = mpsc::channel::<Inbound>();
    let mut slots: Vec<Option<TcpStream>> = (0..m).map(|_| None).collect();
    let mut readers = Vec::with_capacity(m);
    for _ in 0..m {
        let (mut stream, peer) = listener.accept()?;
        stream.set_nodelay(true)?;
        let hello = read_message(&mut stream)?
            .ok_or_else(|| RuntimeError::Protocol(format!("{peer} closed before HELLO")))?;
        if hello.kind != Kind::Hello {
            return Err(RuntimeError::Protocol(format!("{peer} opened with {:?}, expected HELLO", hello.kind)));
        }
        let id = hello.sender;
        let slot = slots
            .get_mut(id as usize)
            .ok_or_else(|| RuntimeError::Protocol(format!("worker id {id} out of range for m = {m}")))?;
        if slot.is_some() {
            return Err(RuntimeError::DuplicateHello(id));
        }
        let mut reader = stream.try_clone()?;
        *slot = Some(stream);
        emit("hello", Some(id), 0, None, started);
        debug!("worker {id} connected from {peer}");
        let tx = tx.clone();
        readers.push(thread::spawn(move || loop {
            match read_message(&mut reader) {
                Ok(Some(msg)) => {
                    if tx.send(Inbound::Message(id, msg)).is_err() {
                        break;
                    }
                }
                Ok(None) => {
                    let _ = tx.send(Inbound::Closed(id));
                    break;
                }
                Err(e) => {
                    let _ = tx.send(Inbound::Failed(id, e.to_string()));
                    break;
                }
            }
        }));
    }
    drop(tx);
    let mut writers: Vec<TcpStream> = slots.into_iter().map(|s| s.expect("every id said HELLO")).collect();

    let t0 = Instant::now();
    let mut server = Server {
        problem,
        config,
        x: config.x0.clone(),
        alpha_bar: vec![0.0; d],
        u: vec![0.0; m * d],
        alpha_sum: vec![0.0; d],
        pending: vec![None; m],
    };
    let mut report = PsReport { counts: vec![0; m], ..PsReport::default() };
    let mut since_epoch = 0usize;
    let epoch_len = problem.n();
    let mut outcome: Result<(), RuntimeError> = Ok(());
    let done = |updates: u64| config.stop.max_updates.is_some_and(|t| updates >= t);

    if !done(0) {
        loop {
            let now = Instant::now();
            if now >= deadline {
                outcome = Err(RuntimeError::Timeout(config.timeout));
                break;
            }
            let (j, msg) = match rx.recv_timeout(deadline - now) {
                Ok(Inbound::Message(j, msg)) => (j, msg),
                Ok(Inbound::Closed(j)) => {
                    outcome = Err(RuntimeError::Disconnected { machine: j, reason: "connection closed".into() });
                    break;
                }
                Ok(Inbound::Failed(j, reason)) => {
                    outcome = Err(RuntimeError::Disconnected { machine: j, reason });
                    break;
                }
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => {
                    outcome = Err(RuntimeError::Protocol("all readers exited".into()));
                    break;
                }
            };
            if msg.kind != Kind::Update || msg.payload.len() != d {
                outcome = Err(RuntimeError::Protocol(format!(
                    "machine {j} sent {:?} with {} values during the run",
                    msg.kind,
                    msg.payload.len()
                )));
                break;
            }
            let ju = j as usize;
            report.counts[ju] += 1;
            report.arrivals.push(j);
            report.updates += 1;
            match server.apply(ju, &msg.payload, &mut writers) {
                Ok(round_complete) => {
                    if round_complete && config.rule.is_synchronous() {
                        let param = WireMessage::param(server.x.clone());
                        if let Err(e) = (0..m).try_for_each(|k| send(&mut writers, k, &param)) {
                            outcome = Err(e);
                            break;
                        }
                    }
                    if config.record_trajectory && round_complete {
                        report.trajectory.push(server.x.clone());
                    }
                }
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
            since_epoch += 1;
            if since_epoch >= epoch_len {
                since_epoch = 0;
                report.epochs += 1;
                let metric = config.stop.metric.eval(problem, &server.x);
                emit("epoch", None, report.epochs, Some(metric), t0);
                if !metric.is_finite() {
                    info!("metric became non-finite at epoch {}", report.epochs);
                    break;
                }
                if config.stop.threshold.is_some_and(|t| metric <= t) {
                    report.converged = true;
                    report.time_to_threshold = Some(t0.elapsed().as_secs_f64());
                    emit("converged", None, report.epochs, Some(metric), t0);
                    break;
                }
            }
            if done(report.updates) {
                break;
            }
        }
    }
    report.elapsed = t0.elapsed().as_secs_f64();
    report.final_metric = config.stop.metric.eval(problem, &server.x);
    report.x = server.x;
    emit("stop", None, report.epochs, Some(report.final_metric), t0);

    let stop = WireMessage::stop();
    for (j, w) in writers.iter_mut().enumerate() {
        if let Err(e) = write_message(w, &stop) {
            debug!("STOP to worker {j} failed: {e}");
        }
    }
    let mut open = m;
    while open > 0 {
        let now = Instant::now();
        let wait = (deadline.max(now + Duration::from_secs(5))) - now;
        match rx.recv_timeout(wait) {
            Ok(Inbound::Message(..)) => {}
            Ok(Inbound::Closed(_)) | Ok(Inbound::Failed(..)) => open -= 1,
            Err(_) => break,
        }
    }
    for w in &writers {
        let _ = w.shutdown(std::net::Shutdown::Both);
    }
    for r in readers {
        let _ = r.join();
    }
    outcome.map(|_| report)
}
