//! Asynchronous distributed SAGA under a stochastic delay model: problem
//! generation, the exact algorithm, baselines, and a potential-function verifier.

pub mod adsaga;
pub mod baselines;
pub mod delay;
pub mod linalg;
pub mod potential;
pub mod problem;
pub mod sim;

pub use adsaga::{AdsagaError, AdsagaSim, AdsagaState};
pub use baselines::Algorithm;
pub use delay::{DelayError, DelayModel};
pub use problem::{generate_least_squares, partition, Constants, Partition, Problem, ProblemError};
pub use sim::{Granularity, Metric, Simulated, StopRule, Trace};
