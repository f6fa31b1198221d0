use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use adsaga_core::{generate_least_squares, partition, Algorithm, DelayModel, Metric, Problem};
use adsaga_harness::config::{GridName, GridSpec, RunConfig};
use adsaga_harness::potential_check::{check_states, CheckSettings};
use adsaga_harness::{collect_results, grid_search, plot_csv, run_experiment, run_sweep, HarnessError, SweepConfig};
use adsaga_net::local::{measure_wallclock, write_wallclock_csv, WallclockRow, WallclockSweep};
use adsaga_net::worker::{connect, run_worker, WorkerConfig};
use adsaga_net::{roles, serve, PsConfig, StopCriterion};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adsaga", version, about = "Asynchronous distributed SAGA: simulator, experiments and TCP runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a least-squares instance and save it with a JSON sidecar.
    GenProblem {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every seed of a config and write manifest.json, results.csv and traces.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search the config's step-size grid and print the report as JSON.
    GridSearch {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the expected one-step potential contraction on reachable states (JSONL).
    PotentialCheck {
        #[arg(long, default_value_t = 24)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Defaults to the theoretical step size.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long, default_value_t = 100)]
        states: usize,
        #[arg(long, default_value_t = 400)]
        max_steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a sweep config over machine counts and algorithms.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ms: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        algorithms: Option<Vec<Algorithm>>,
        /// Replace the seed list of every cell.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect sweep manifests (and optional wallclock rows) into plot CSV.
    EmitPlot {
        #[arg(long)]
        dir: Option<PathBuf>,
        /// JSON array written by `wallclock --json`.
        #[arg(long)]
        wallclock: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time loopback runtime runs to the threshold over machine counts and algorithms.
    Wallclock {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, value_delimiter = ',', default_value = "8")]
        ms: Vec<usize>,
        /// `algorithm=eta` pairs.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<String>,
        #[arg(long, default_value_t = 200)]
        work_us: u64,
        /// Slow-down of the last worker.
        #[arg(long, default_value_t = 1.0)]
        straggler: f64,
        #[arg(long, default_value_t = 1e-6)]
        threshold: f64,
        #[arg(long, default_value = "dist_sq")]
        metric: Metric,
        #[arg(long)]
        max_updates: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        timeout_s: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the parameter server and wait for `m` workers.
    ServePs {
        #[arg(long, default_value_t = 7070)]
        port: u16,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        eta: f64,
        /// Run config supplying the problem, algorithm, rates and threshold.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        max_updates: Option<u64>,
        #[arg(long, default_value_t = 600)]
        timeout_s: u64,
        /// JSONL run log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Final report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one worker against a parameter server.
    RunWorker {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 7070)]
        port: u16,
        #[arg(long)]
        id: u32,
        /// Problem file written by `gen-problem`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        partition_seed: u64,
        #[arg(long, default_value = "adsaga")]
        algorithm: Algorithm,
        #[arg(long, default_value_t = 0)]
        work_us: u64,
    },
}

#[derive(Args)]
struct ProblemArgs {
    #[arg(long, default_value_t = 48)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    problem_seed: u64,
    /// Load the problem from a file instead.
    #[arg(long)]
    problem_file: Option<PathBuf>,
}

impl ProblemArgs {
    fn load(&self) -> Result<Problem, HarnessError> {
        Ok(match &self.problem_file {
            Some(p) => Problem::load(p)?,
            None => generate_least_squares(self.n, self.d, self.sigma, self.problem_seed)?,
        })
    }
}

/// A config file plus command-line overrides of any of its fields.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    problem_file: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    /// Fixed step size; replaces any grid.
    #[arg(long, conflicts_with = "grid")]
    eta: Option<f64>,
    /// `default`, `literal` or a comma-separated list; replaces any step size.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    max_iterations: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// `iteration`, `epoch` or `endpoints`.
    #[arg(long)]
    granularity: Option<String>,
}

fn parse_grid(s: &str) -> Result<GridSpec, HarnessError> {
    match s {
        "default" => Ok(GridSpec::Named(GridName::Default)),
        "literal" => Ok(GridSpec::Named(GridName::Literal)),
        list => list
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| HarnessError::Config(format!("grid value {v:?}: {e}"))))
            .collect::<Result<_, _>>()
            .map(GridSpec::Values),
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let mut c: RunConfig = serde_json::from_str(&fs::read_to_string(&self.config)?)?;
        if let Some(a) = self.algorithm {
            c.algorithm = a;
        }
        if let Some(p) = &self.problem_file {
            c.problem_file = Some(p.clone());
            c.problem = None;
        }
        if let Some(m) = self.m {
            c.m = m;
        }
        if let Some(r) = &self.rates {
            c.rates = Some(r.clone());
        }
        if let Some(eta) = self.eta {
            c.eta = Some(eta);
            c.grid = None;
        }
        if let Some(g) = &self.grid {
            c.grid = Some(parse_grid(g)?);
            c.eta = None;
        }
        if let Some(b) = self.block {
            c.block = b;
        }
        if let Some(t) = self.threshold {
            c.threshold = t;
        }
        if let Some(m) = self.metric {
            c.metric = m;
        }
        if let Some(k) = self.max_iterations {
            c.max_iterations = k;
        }
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(g) = &self.granularity {
            c.granularity = serde_json::from_value(serde_json::Value::String(g.clone()))?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<(), HarnessError> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn parse_runs(runs: &[String]) -> Result<Vec<(Algorithm, f64)>, HarnessError> {
    runs.iter()
        .map(|r| {
            let (a, e) = r.split_once('=').ok_or_else(|| HarnessError::Config(format!("expected algorithm=eta, got {r:?}")))?;
            let algorithm = a.parse::<Algorithm>().map_err(HarnessError::Config)?;
            let eta = e.parse::<f64>().map_err(|err| HarnessError::Config(format!("{r:?}: {err}")))?;
            Ok((algorithm, eta))
        })
        .collect()
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::GenProblem { n, d, sigma, seed, out } => {
            let p = generate_least_squares(n, d, sigma, seed)?;
            p.save(&out)?;
            p.save_metadata(out.with_extension("json"))?;
            write_json(&p.metadata(), None)?;
        }
        Command::Simulate { run, out } => {
            let result = run_experiment(&run.resolve()?, Some(&out))?;
            write_json(&result.aggregate, None)?;
        }
        Command::GridSearch { run, out } => {
            let config = run.resolve()?;
            if config.grid.is_none() {
                return Err(HarnessError::Config("grid-search needs a grid (use --grid)".into()));
            }
            let report = grid_search(&config.load_problem()?, &config)?;
            write_json(&report, out.as_deref())?;
        }
        Command::PotentialCheck { n, d, sigma, seed, m, rates, eta, states, max_steps, out } => {
            let problem = generate_least_squares(n, d, sigma, seed)?;
            let settings = CheckSettings { m, rates, eta, states, max_steps, seed };
            let (_, checks) = check_states(&problem, &settings)?;
            let mut w = output(out.as_deref())?;
            let mut failures = 0;
            for c in &checks {
                let r = &c.contraction;
                failures += usize::from(!r.pass);
                let line = serde_json::json!({
                    "phi": r.phi, "phi_next_expected": r.phi_next_expected, "gamma": r.gamma, "pass": r.pass
                });
                writeln!(w, "{line}")?;
            }
            w.flush()?;
            if failures > 0 {
                return Err(HarnessError::Config(format!("{failures} of {} states violated the contraction", checks.len())));
            }
        }
        Command::Sweep { config, ms, algorithms, seeds, out } => {
            let mut sweep = SweepConfig::load(config)?;
            if let Some(ms) = ms {
                sweep.ms = ms;
            }
            if let Some(a) = algorithms {
                sweep.algorithms = a;
            }
            if let Some(s) = seeds {
                sweep.run["seeds"] = serde_json::to_value(s)?;
            }
            fs::create_dir_all(&out)?;
            let results = run_sweep(&sweep, Some(&out))?;
            log::info!("{} cells written under {}", results.len(), out.display());
        }
        Command::EmitPlot { dir, wallclock, out } => {
            let results = match dir {
                Some(d) => collect_results(&d)?,
                None => Vec::new(),
            };
            let rows: Vec<WallclockRow> = match wallclock {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => Vec::new(),
            };
            let mut w = output(out.as_deref())?;
            w.write_all(plot_csv(&results, &rows)?.as_bytes())?;
            w.flush()?;
        }
        Command::Wallclock { problem, ms, runs, work_us, straggler, threshold, metric, max_updates, seed, timeout_s, csv, json } => {
            let problem = problem.load()?;
            let base = Duration::from_micros(work_us);
            let delays = move |m: usize| {
                (0..m).map(|j| if j + 1 == m && m > 1 { base.mul_f64(straggler) } else { base }).collect()
            };
            let sweep = WallclockSweep {
                problem: &problem,
                ms,
                algorithms: parse_runs(&runs)?,
                delays: &delays,
                stop: StopCriterion { max_updates, threshold: Some(threshold), metric },
                seed,
                timeout: Duration::from_secs(timeout_s),
            };
            let rows = measure_wallclock(&sweep);
            write_wallclock_csv(&rows, output(csv.as_deref())?)?;
            if let Some(p) = json {
                write_json(&rows, Some(&p))?;
            }
        }
        Command::ServePs { port, m, eta, config, max_updates, timeout_s, log, out } => {
            let c: RunConfig = serde_json::from_str(&fs::read_to_string(&config)?)?;
            let problem = c.load_problem()?;
            let weights = match &c.rates {
                Some(r) => Some(DelayModel::from_rates(r)?),
                None => None,
            };
            let (rule, _, _) = roles(c.algorithm, m, weights.as_ref())?;
            let ps = PsConfig {
                m,
                eta,
                rule,
                x0: vec![0.0; problem.d()],
                stop: StopCriterion { max_updates, threshold: Some(c.threshold), metric: c.metric },
                record_trajectory: false,
                timeout: Duration::from_secs(timeout_s),
            };
            let listener = TcpListener::bind(("0.0.0.0", port))?;
            log::info!("parameter server listening on {}", listener.local_addr()?);
            let mut log_file = match log {
                Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
                None => None,
            };
            let report = serve(&listener, &problem, &ps, log_file.as_mut().map(|f| f as &mut (dyn Write + Send)))?;
            if let Some(mut f) = log_file {
                f.flush()?;
            }
            write_json(&report, out.as_deref())?;
        }
        Command::RunWorker { host, port, id, data, seed, m, partition_seed, algorithm, work_us } => {
            let problem = Problem::load(&data)?;
            let part = partition(problem.n(), m, partition_seed)?;
            let set = part
                .sets()
                .get(id as usize)
                .ok_or_else(|| HarnessError::Config(format!("worker id {id} out of range for m = {m}")))?;
            let (_, payload, selection) = roles(algorithm, m, None)?;
            let config = WorkerConfig {
                id,
                seed,
                payload,
                selection,
                work_delay: Duration::from_micros(work_us),
                record_gradients: false,
            };
            let stream = connect((host.as_str(), port), Duration::from_secs(30))?;
            let report = run_worker(stream, &problem, set, &config)?;
            log::info!("worker {id} sent {} updates", report.updates_sent);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
