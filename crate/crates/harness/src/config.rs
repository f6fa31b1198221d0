//! Run configuration: one JSON document per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use adsaga_core::problem::block;
use adsaga_core::{generate_least_squares, Algorithm, DelayModel, Granularity, Metric, Problem};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub n: usize,
    pub d: usize,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridName {
    /// `{0.05 i / L : i = 1..40}`.
    Default,
    /// `{0.05 i : i = 1..40}`, unscaled.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Named(GridName),
    Values(Vec<f64>),
}

pub const GRID_POINTS: usize = 40;
pub const GRID_STEP: f64 = 0.05;

impl GridSpec {
    /// Concrete step sizes, ascending, for a problem with component smoothness `l`.
    pub fn resolve(&self, l: f64) -> Vec<f64> {
        let scaled = |scale: f64| (1..=GRID_POINTS).map(|i| GRID_STEP * i as f64 * scale).collect();
        let mut v: Vec<f64> = match self {
            GridSpec::Named(GridName::Default) => scaled(1.0 / l),
            GridSpec::Named(GridName::Literal) => scaled(1.0),
            GridSpec::Values(v) => v.clone(),
        };
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_file: Option<PathBuf>,
    pub m: usize,
    /// Relative machine rates; absent means uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default = "one")]
    pub block: usize,
    pub threshold: f64,
    #[serde(default)]
    pub metric: Metric,
    pub max_iterations: u64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub granularity: Granularity,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.problem.is_some() == self.problem_file.is_some() {
            return bad("give exactly one of `problem` and `problem_file`".into());
        }
        if self.eta.is_some() == self.grid.is_some() {
            return bad("give exactly one of `eta` and `grid`".into());
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return bad(format!("eta must be positive and finite, got {eta}"));
            }
        }
        if let Some(GridSpec::Values(v)) = &self.grid {
            if v.is_empty() || v.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return bad("grid values must be a non-empty list of positive step sizes".into());
            }
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return bad(format!("threshold must be positive, got {}", self.threshold));
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.m == 0 || self.block == 0 {
            return bad("m and block must be at least 1".into());
        }
        if let Some(r) = &self.rates {
            if r.len() != self.m {
                return bad(format!("{} rates for m = {}", r.len(), self.m));
            }
        }
        Ok(())
    }

    /// The problem this config describes, blocked if requested.
    pub fn load_problem(&self) -> Result<Problem, HarnessError> {
        let base = match (&self.problem, &self.problem_file) {
            (Some(s), None) => generate_least_squares(s.n, s.d, s.sigma, s.seed)?,
            (None, Some(path)) => Problem::load(path)?,
            _ => return Err(HarnessError::Config("give exactly one of `problem` and `problem_file`".into())),
        };
        Ok(if self.block > 1 { block(&base, self.block)? } else { base })
    }

    pub fn delay_model(&self) -> Result<DelayModel, HarnessError> {
        Ok(match &self.rates {
            Some(r) => DelayModel::from_rates(r)?,
            None => DelayModel::uniform(self.m)?,
        })
    }

    /// A copy that runs a single fixed step size.
    pub fn with_eta(&self, eta: f64) -> RunConfig {
        RunConfig { eta: Some(eta), grid: None, ..self.clone() }
    }
}
