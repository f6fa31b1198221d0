//! TCP parameter-server runtime: wire protocol, server and worker loops,
//! in-process loopback runs, and replay through the simulator.

pub mod local;
pub mod ps;
pub mod replay;
pub mod wire;
pub mod worker;

use std::time::Duration;

use adsaga_core::{Algorithm, DelayModel};
use thiserror::Error;

pub use local::{measure_wallclock, run_local, write_wallclock_csv, LocalReport, LocalRun, WallclockRow, WallclockSweep};
pub use ps::{serve, PsConfig, PsReport, ServerRule, StopCriterion};
pub use wire::{decode, encode, Kind, WireError, WireMessage};
pub use worker::{run_worker, Payload, Selection, WorkerConfig, WorkerReport};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("worker {0} said HELLO twice")]
    DuplicateHello(u32),
    #[error("worker {machine} disconnected: {reason}")]
    Disconnected { machine: u32, reason: String },
    #[error("run exceeded its {0:?} budget")]
    Timeout(Duration),
    #[error("{0} cannot run on the distributed runtime")]
    Unsupported(Algorithm),
}

/// Server rule and worker behavior realizing `algorithm`. `weights` are the
/// rates ADSAGA assumes; `None` means uniform.
pub fn roles(algorithm: Algorithm, m: usize, weights: Option<&DelayModel>) -> Result<(ServerRule, Payload, Selection), RuntimeError> {
    let uniform = || DelayModel::uniform(m).map_err(|e| RuntimeError::Protocol(e.to_string()));
    Ok(match algorithm {
        Algorithm::Adsaga => (
            ServerRule::Adsaga { weights: weights.cloned().map_or_else(uniform, Ok)? },
            Payload::SagaDelta,
            Selection::Uniform,
        ),
        Algorithm::AdsagaVanilla => (ServerRule::Adsaga { weights: uniform()? }, Payload::SagaDelta, Selection::Uniform),
        Algorithm::Iag => (ServerRule::Iag, Payload::SagaDelta, Selection::Cyclic),
        Algorithm::AsyncSgd => (ServerRule::Sgd, Payload::Gradient, Selection::Uniform),
        Algorithm::MinibatchSaga => (ServerRule::MinibatchSaga, Payload::SagaDelta, Selection::Uniform),
        Algorithm::MinibatchSgd => (ServerRule::MinibatchSgd, Payload::Gradient, Selection::Uniform),
        Algorithm::Asaga => return Err(RuntimeError::Unsupported(algorithm)),
    })
}
