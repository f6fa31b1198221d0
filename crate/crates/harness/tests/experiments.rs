use std::fs;
use std::process::{Command, Stdio};

use adsaga_core::{Algorithm, Granularity, Metric};
use adsaga_harness::config::{GridSpec, ProblemSpec, RunConfig};
use adsaga_harness::sweep::{cell_dir, PLOT_HEADER};
use adsaga_harness::{collect_results, grid_search, plot_csv, run_experiment, run_sweep, HarnessError, SweepConfig};

fn config(algorithm: Algorithm) -> RunConfig {
    RunConfig {
        algorithm,
        problem: Some(ProblemSpec { n: 24, d: 4, sigma: 1.0, seed: 3 }),
        problem_file: None,
        m: 3,
        rates: None,
        eta: Some(0.1),
        grid: None,
        block: 1,
        threshold: 0.05,
        metric: Metric::DistSq,
        max_iterations: 20_000,
        seeds: vec![0, 1, 2, 3],
        granularity: Granularity::Epoch,
    }
}

#[test]
fn all_converging_seeds_are_averaged() {
    let r = run_experiment(&config(Algorithm::Adsaga), None).unwrap();
    assert_eq!(r.aggregate.converged, 4);
    let iters: Vec<f64> = r.seeds.iter().map(|o| o.iterations.unwrap() as f64).collect();
    let mean = iters.iter().sum::<f64>() / 4.0;
    assert!((r.aggregate.mean.unwrap() - mean).abs() < 1e-9);
    let var = iters.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!((r.aggregate.stderr.unwrap() - (var / 4.0).sqrt()).abs() < 1e-9);
}

#[test]
fn zero_budget_leaves_every_seed_unconverged() {
    let mut c = config(Algorithm::Adsaga);
    c.max_iterations = 0;
    let r = run_experiment(&c, None).unwrap();
    assert_eq!(r.aggregate.converged, 0);
    assert_eq!(r.aggregate.non_converged, 4);
    assert!(r.aggregate.mean.is_none() && r.aggregate.stderr.is_none());
    assert!(r.aggregate.strict_mean().is_infinite());
}

#[test]
fn mean_excludes_non_converged_seeds() {
    // Async SGD stalls at its noise floor while seeds stay distinct.
    let mut c = config(Algorithm::AsyncSgd);
    c.threshold = 0.2;
    c.max_iterations = 3000;
    c.eta = Some(0.2);
    let r = run_experiment(&c, None).unwrap();
    let done: Vec<u64> = r.seeds.iter().filter_map(|o| o.iterations).collect();
    assert_eq!(r.aggregate.converged, done.len());
    assert_eq!(r.aggregate.converged + r.aggregate.non_converged, 4);
    if let Some(mean) = r.aggregate.mean {
        assert!((mean - done.iter().sum::<u64>() as f64 / done.len() as f64).abs() < 1e-9);
    }
}

#[test]
fn identical_configs_write_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut c = config(Algorithm::Iag);
    c.eta = None;
    c.grid = Some(GridSpec::Values(vec![0.05, 0.1, 0.2]));
    run_experiment(&c, Some(a.path())).unwrap();
    run_experiment(&c, Some(b.path())).unwrap();
    for file in ["manifest.json", "results.csv", "traces/seed_0.csv", "traces/seed_3.csv"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    let manifest = fs::read_to_string(a.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("exclude non-converged seeds"));
    assert!(manifest.contains("\"best_eta\""));
}

#[test]
fn singleton_grid_returns_its_value() {
    let mut c = config(Algorithm::Adsaga);
    c.eta = None;
    c.grid = Some(GridSpec::Values(vec![0.07]));
    let p = c.load_problem().unwrap();
    let g = grid_search(&p, &c).unwrap();
    assert_eq!(g.best_eta, 0.07);
    assert!(!g.at_endpoint);
}

#[test]
fn diverging_grid_is_an_error() {
    let mut c = config(Algorithm::Adsaga);
    c.eta = None;
    c.grid = Some(GridSpec::Values(vec![50.0, 100.0]));
    c.max_iterations = 5000;
    let p = c.load_problem().unwrap();
    match grid_search(&p, &c) {
        Err(HarnessError::AllDiverged { grid }) => assert_eq!(grid, vec![50.0, 100.0]),
        other => panic!("expected an all-diverged error, got {other:?}"),
    }
}

#[test]
fn edge_optimum_is_flagged() {
    let mut c = config(Algorithm::Adsaga);
    c.eta = None;
    c.grid = Some(GridSpec::Values(vec![0.001, 0.002, 0.004]));
    let p = c.load_problem().unwrap();
    let g = grid_search(&p, &c).unwrap();
    assert_eq!(g.best_eta, 0.004);
    assert!(g.at_endpoint);
}

#[test]
fn grid_prefers_fewer_failures_then_fewer_iterations() {
    let mut c = config(Algorithm::Adsaga);
    c.eta = None;
    c.grid = Some(GridSpec::Values(vec![0.02, 0.05, 0.1, 0.2, 50.0]));
    let p = c.load_problem().unwrap();
    let g = grid_search(&p, &c).unwrap();
    let best = &g.points[g.best_index];
    for q in &g.points {
        let k = (q.aggregate.non_converged, q.aggregate.mean.unwrap_or(f64::INFINITY));
        assert!(k >= (best.aggregate.non_converged, best.aggregate.mean.unwrap()), "{q:?} beats {best:?}");
    }
    assert!(g.points[4].mean_final_metric.is_none());
}

#[test]
fn sweep_writes_one_plot_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let sweep: SweepConfig = serde_json::from_str(
        r#"{"ms": [1, 2, 3, 4, 6], "algorithms": ["adsaga", "iag"],
            "run": {"problem": {"n": 24, "d": 4, "sigma": 1.0, "seed": 3}, "eta": 0.1,
                    "threshold": 0.05, "max_iterations": 20000, "seeds": [0, 1]}}"#,
    )
    .unwrap();
    let results = run_sweep(&sweep, Some(dir.path())).unwrap();
    assert_eq!(results.len(), 10);
    assert!(cell_dir(dir.path(), Algorithm::Iag, 6).join("manifest.json").is_file());
    let plot = fs::read_to_string(dir.path().join("plot.csv")).unwrap();
    let lines: Vec<&str> = plot.lines().collect();
    assert_eq!(lines[0], PLOT_HEADER);
    assert_eq!(lines.iter().filter(|l| l.contains(",adsaga,")).count(), 5);
    assert_eq!(lines.iter().filter(|l| l.contains(",iag,")).count(), 5);
    let collected = collect_results(dir.path()).unwrap();
    assert_eq!(plot_csv(&collected, &[]).unwrap(), plot);
}

#[test]
fn plot_rows_never_invent_numbers() {
    let mut c = config(Algorithm::Adsaga);
    let ok = run_experiment(&c, None).unwrap();
    c.max_iterations = 0;
    c.algorithm = Algorithm::Iag;
    let failed = run_experiment(&c, None).unwrap();
    let single = plot_csv(std::slice::from_ref(&ok), &[]).unwrap();
    assert_eq!(single.lines().count(), 2);
    let text = plot_csv(&[ok, failed], &[]).unwrap();
    let row = text.lines().find(|l| l.contains(",iag,")).unwrap();
    assert_eq!(row, "3,iag,,,0,4,not_converged,");
    let mut gap = c.clone();
    gap.metric = Metric::Gap;
    gap.max_iterations = 10;
    let other = run_experiment(&gap, None).unwrap();
    let first = run_experiment(&config(Algorithm::Adsaga), None).unwrap();
    assert!(plot_csv(&[first, other], &[]).is_err());
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adsaga"));
    c.env("RUST_LOG", "warn").stdout(Stdio::null());
    c
}

#[test]
fn cli_simulate_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, serde_json::to_string(&config(Algorithm::Adsaga)).unwrap()).unwrap();
    let out = dir.path().join("out");
    let status = cli()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--algorithm", "iag", "--seeds", "5,6", "--grid", "0.05,0.1", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["algorithm"], "iag");
    assert_eq!(manifest["config"]["seeds"], serde_json::json!([5, 6]));
    assert!(manifest["result"]["grid"]["best_eta"].is_number());
    assert!(out.join("traces/seed_6.csv").is_file());
}

#[test]
fn cli_rejects_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let mut c = config(Algorithm::Adsaga);
    c.seeds.clear();
    fs::write(&cfg, serde_json::to_string(&c).unwrap()).unwrap();
    let out = cli().args(["simulate", "--config"]).arg(&cfg).args(["--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeds"));
}

#[test]
fn cli_potential_check_emits_jsonl() {
    let out = cli().args(["potential-check", "--states", "5", "--max-steps", "50"]).stdout(Stdio::piped()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["phi", "phi_next_expected", "gamma", "pass"] {
            assert!(v.get(key).is_some(), "{line}");
        }
        assert_eq!(v["pass"], true);
    }
}

#[test]
fn cli_gen_problem_then_distributed_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("p.bin");
    assert!(cli().args(["gen-problem", "--n", "24", "--d", "4", "--sigma", "0", "--seed", "2", "--out"]).arg(&data).status().unwrap().success());
    assert!(dir.path().join("p.json").is_file());
    let cfg = dir.path().join("run.json");
    let mut c = config(Algorithm::Adsaga);
    c.problem = None;
    c.problem_file = Some(data.clone());
    c.threshold = 1e-8;
    fs::write(&cfg, serde_json::to_string(&c).unwrap()).unwrap();

    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port().to_string()
    };
    let log = dir.path().join("log.jsonl");
    let report = dir.path().join("report.json");
    let mut ps = cli()
        .args(["serve-ps", "--port", &port, "--m", "2", "--eta", "0.1", "--timeout-s", "60", "--config"])
        .arg(&cfg)
        .arg("--log")
        .arg(&log)
        .arg("--out")
        .arg(&report)
        .spawn()
        .unwrap();
    let workers: Vec<_> = (0..2)
        .map(|id| {
            cli()
                .args(["run-worker", "--port", &port, "--m", "2", "--id", &id.to_string(), "--data"])
                .arg(&data)
                .spawn()
                .unwrap()
        })
        .collect();
    assert!(ps.wait().unwrap().success());
    for mut w in workers {
        assert!(w.wait().unwrap().success());
    }
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["converged"], true);
    let events: Vec<serde_json::Value> =
        fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.iter().filter(|e| e["event"] == "hello").count(), 2);
    assert_eq!(events.last().unwrap()["event"], "stop");
    for e in &events {
        for key in ["t_wall", "event", "machine", "epoch", "metric"] {
            assert!(e.get(key).is_some());
        }
    }
}
