//! Experiment orchestration: configs, grid search, seeded runs, sweeps and
//! plot data, plus the potential-function checker used by the CLI.

pub mod config;
pub mod experiment;
pub mod potential_check;
pub mod sweep;

use thiserror::Error;

pub use config::{GridName, GridSpec, ProblemSpec, RunConfig};
pub use experiment::{grid_search, run_experiment, run_seeds, Aggregate, ExperimentResult, GridReport, SeedOutcome};
pub use sweep::{collect_results, plot_csv, run_sweep, SweepConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("every step size in the grid diverged: {grid:?}")]
    AllDiverged { grid: Vec<f64> },
    #[error(transparent)]
    Problem(#[from] adsaga_core::ProblemError),
    #[error(transparent)]
    Delay(#[from] adsaga_core::DelayError),
    #[error(transparent)]
    Adsaga(#[from] adsaga_core::AdsagaError),
    #[error(transparent)]
    Potential(#[from] adsaga_core::potential::PotentialError),
    #[error(transparent)]
    Runtime(#[from] adsaga_net::RuntimeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
