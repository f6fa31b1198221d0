//! Sweeps over machine counts and algorithms, and the plot-ready CSV they feed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use adsaga_core::{Algorithm, Metric};
use adsaga_net::WallclockRow;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::experiment::{read_manifest, run_experiment, ExperimentResult};
use crate::HarnessError;

/// A run template without `algorithm` and `m`, crossed with lists of both.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub ms: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub run: Value,
}

impl SweepConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// The run config of one cell.
    pub fn cell(&self, algorithm: Algorithm, m: usize) -> Result<RunConfig, HarnessError> {
        let mut v = self.run.clone();
        let obj = v.as_object_mut().ok_or_else(|| HarnessError::Config("`run` must be an object".into()))?;
        obj.insert("algorithm".into(), serde_json::to_value(algorithm)?);
        obj.insert("m".into(), m.into());
        let c: RunConfig = serde_json::from_value(v)?;
        c.validate()?;
        Ok(c)
    }
}

pub fn cell_dir(root: &Path, algorithm: Algorithm, m: usize) -> PathBuf {
    root.join(format!("{algorithm}_m{m}"))
}

/// Runs every cell in order; a failing cell is logged and skipped.
pub fn run_sweep(sweep: &SweepConfig, out: Option<&Path>) -> Result<Vec<ExperimentResult>, HarnessError> {
    let mut results = Vec::new();
    for &m in &sweep.ms {
        for &algorithm in &sweep.algorithms {
            let config = sweep.cell(algorithm, m)?;
            let dir = out.map(|root| cell_dir(root, algorithm, m));
            match run_experiment(&config, dir.as_deref()) {
                Ok(r) => results.push(r),
                Err(e) => log::error!("{algorithm} at m = {m} failed: {e}"),
            }
        }
    }
    if let Some(root) = out {
        fs::write(root.join("plot.csv"), plot_csv(&results, &[])?)?;
    }
    Ok(results)
}

/// Reads every `*/manifest.json` under `root`, sorted by path.
pub fn collect_results(root: &Path) -> Result<Vec<ExperimentResult>, HarnessError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(Result::ok)
        .map(|e| e.path().join("manifest.json"))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(|p| read_manifest(p).map(|m| m.result)).collect()
}

pub const PLOT_HEADER: &str = "m,algorithm,mean_iters,stderr,converged_seeds,non_converged_seeds,status,wallclock_s";

/// One row per result and per wallclock row, sorted by `(algorithm, m)`.
/// `status` is `converged`, `partial` or `not_converged`; numeric cells are
/// left empty rather than filled in when there is nothing to report.
pub fn plot_csv(results: &[ExperimentResult], wallclock: &[WallclockRow]) -> Result<String, HarnessError> {
    let metrics: Vec<Metric> = results.iter().map(|r| r.metric).collect();
    if metrics.windows(2).any(|w| w[0] != w[1]) {
        return Err(HarnessError::Config("results use different metrics".into()));
    }
    let mut sorted: Vec<&ExperimentResult> = results.iter().collect();
    sorted.sort_by_key(|r| (r.algorithm, r.m));
    let mut out = format!("{PLOT_HEADER}\n");
    for r in sorted {
        let a = &r.aggregate;
        let status = match (a.converged, a.non_converged) {
            (0, _) => "not_converged",
            (_, 0) => "converged",
            _ => "partial",
        };
        let num = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(out, "{},{},{},{},{},{},{},", r.m, r.algorithm, num(a.mean), num(a.stderr), a.converged, a.non_converged, status)
            .expect("write to string");
    }
    let mut rows: Vec<&WallclockRow> = wallclock.iter().collect();
    rows.sort_by_key(|r| (r.algorithm, r.m));
    for w in rows {
        let status = if w.seconds_to_threshold.is_some() { "converged" } else { "not_converged" };
        let secs = w.seconds_to_threshold.map(|s| format!("{s:.6}")).unwrap_or_default();
        writeln!(out, "{},{},,,{},{},{},{}", w.m, w.algorithm, u8::from(w.seconds_to_threshold.is_some()), u8::from(w.seconds_to_threshold.is_none()), status, secs)
            .expect("write to string");
    }
    Ok(out)
}
