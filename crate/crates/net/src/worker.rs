//! Worker loop: send the pending update, wait for the iterate, draw a local
//! function, compute the next update.

use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use adsaga_core::Problem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::wire::{read_message, write_message, Kind, WireMessage};
use crate::RuntimeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    /// `grad f_i(x) - alpha_i`, refreshing the local `alpha_i`.
    SagaDelta,
    /// `grad f_i(x)`.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Uniform,
    Cyclic,
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub id: u32,
    pub seed: u64,
    pub payload: Payload,
    pub selection: Selection,
    /// Artificial compute time added to every update.
    pub work_delay: Duration,
    /// Keep `(i, x, update)` for every computed update.
    pub record_gradients: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientRecord {
    pub i: usize,
    pub x: Vec<f64>,
    pub update: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WorkerReport {
    pub id: u32,
    /// Function drawn after each PARAM, in order.
    pub draws: Vec<usize>,
    pub updates_sent: u64,
    pub gradients: Vec<GradientRecord>,
}

/// The function-draw generator of worker `id`.
pub fn worker_rng(seed: u64, id: u32) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(1 << 20 | u64::from(id));
    r
}

/// Connects, retrying until `patience` elapses.
pub fn connect<A: ToSocketAddrs + Copy>(addr: A, patience: Duration) -> Result<TcpStream, RuntimeError> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if start.elapsed() < patience => {
                log::debug!("connect failed ({e}), retrying");
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Runs worker `config.id` over its function set until the server sends STOP.
pub fn run_worker(mut stream: TcpStream, problem: &Problem, set: &[usize], config: &WorkerConfig) -> Result<WorkerReport, RuntimeError> {
    if set.is_empty() {
        return Err(RuntimeError::Protocol(format!("worker {} has no functions", config.id)));
    }
    let d = problem.d();
    let lost = |reason: String| RuntimeError::Disconnected { machine: config.id, reason };
    let mut rng = worker_rng(config.seed, config.id);
    let mut alpha = vec![0.0; set.len() * d];
    let mut cursor = 0usize;
    let mut report = WorkerReport { id: config.id, ..WorkerReport::default() };
    let mut grad = vec![0.0; d];

    write_message(&mut stream, &WireMessage::hello(config.id)).map_err(|e| lost(e.to_string()))?;
    write_message(&mut stream, &WireMessage::update(config.id, vec![0.0; d])).map_err(|e| lost(e.to_string()))?;
    report.updates_sent = 1;
    loop {
        let msg = read_message(&mut stream)?.ok_or_else(|| lost("server closed the connection".into()))?;
        match msg.kind {
            Kind::Stop => break,
            Kind::Param if msg.payload.len() == d => {
                let slot = match config.selection {
                    Selection::Uniform => rng.random_range(0..set.len()),
                    Selection::Cyclic => {
                        let s = cursor;
                        cursor = (cursor + 1) % set.len();
                        s
                    }
                };
                let i = set[slot];
                report.draws.push(i);
                problem.grad_component_into(i, &msg.payload, &mut grad);
                let update = match config.payload {
                    Payload::Gradient => grad.clone(),
                    Payload::SagaDelta => {
                        let a = &mut alpha[slot * d..(slot + 1) * d];
                        let h = grad.iter().zip(a.iter()).map(|(g, b)| g - b).collect();
                        a.copy_from_slice(&grad);
                        h
                    }
                };
                if config.record_gradients {
                    report.gradients.push(GradientRecord { i, x: msg.payload, update: update.clone() });
                }
                if !config.work_delay.is_zero() {
                    thread::sleep(config.work_delay);
                }
                write_message(&mut stream, &WireMessage::update(config.id, update)).map_err(|e| lost(e.to_string()))?;
                report.updates_sent += 1;
            }
            other => {
                return Err(RuntimeError::Protocol(format!(
                    "worker {} received {other:?} with {} values",
                    config.id,
                    msg.payload.len()
                )))
            }
        }
    }
    let _ = stream.shutdown(Shutdown::Write);
    Ok(report)
}
