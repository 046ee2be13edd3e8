use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use bnnps_core::checkpoint::Checkpoint;
use bnnps_core::env::{read_csv, write_csv, write_meta, Action, Dataset, Sampling, State, WetChicken, WET_CHICKEN_COLUMNS};
use bnnps_core::policy::Policy;
use bnnps_core::rng::RngStream;
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::{Benchmark, ExperimentConfig, MethodKind};
use crate::pipeline::{self, mean_and_stderr, Fitted, ModelRow};
use crate::run::{RunDir, DEFAULT_OUT_ROOT, OUT_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "bnnps", version, about = "BNNs with stochastic inputs and model-based policy search")]
pub struct Cli {
    /// Directory that receives one sub-directory per run
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = DEFAULT_OUT_ROOT)]
    pub out_root: PathBuf,
    /// Worker threads for commands that run several seeds
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

/// Where the experiment config comes from, plus command-line overrides.
#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// Config file; defaults of the benchmark when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub benchmark: Option<Benchmark>,
    /// alpha, vb or mlp
    #[arg(long)]
    pub method: Option<MethodKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset as CSV
    GenData {
        benchmark: Benchmark,
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Wet-Chicken collection protocol: uniform or random-walk
        #[arg(long, default_value = "uniform", value_parser = parse_sampling)]
        sampling: Sampling,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the full config with defaults filled in
    PrintConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fit a model and write its checkpoint and loss trace
    TrainModel {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training CSV; generated from the config seed when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model checkpoint on a test CSV
    EvalModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Predictive samples per test point; the benchmark's `eval.samples` default when omitted
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Model and true Δy draws at one Wet-Chicken state and action
    PredictiveDump {
        #[arg(long)]
        model: PathBuf,
        /// x,y
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        state: [f64; 2],
        /// ax,ay
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        action: [f64; 2],
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize a policy through roll-outs of a model checkpoint
    TrainPolicy {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Transitions whose states seed the roll-outs
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a policy on the true Wet-Chicken dynamics
    EvalPolicy {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Rerun every table end to end and write mean ± stderr rows
    ReproTables {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Directory with wet-chicken.conf, toy-bimodal.conf and
        /// toy-heteroskedastic.conf; built-in defaults when omitted
        #[arg(long)]
        config_dir: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    <[f64; 2]>::try_from(v).map_err(|_| format!("expected two comma-separated numbers, got {s:?}"))
}

fn parse_sampling(s: &str) -> Result<Sampling, String> {
    Sampling::parse(s).ok_or_else(|| format!("expected random-walk or uniform, got {s:?}"))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                let cfg = ExperimentConfig::parse(&text)?;
                if let Some(b) = self.benchmark {
                    if b != cfg.benchmark {
                        bail!(crate::config::ConfigError {
                            line: None,
                            message: format!("--benchmark {b} conflicts with {} in {}", cfg.benchmark, path.display()),
                        });
                    }
                }
                cfg
            }
            None => ExperimentConfig::defaults(self.benchmark.unwrap_or(Benchmark::WetChicken)),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(a) = self.alpha {
            cfg.model.alpha = a;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn columns(benchmark: Benchmark) -> (Vec<&'static str>, usize) {
    match benchmark {
        Benchmark::WetChicken => (WET_CHICKEN_COLUMNS.to_vec(), 4),
        _ => (vec!["x", "y"], 1),
    }
}

/// Sidecar next to a dataset: `data.csv` -> `data.csv.meta`.
pub fn meta_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn load_data(path: &Path, benchmark: Benchmark) -> Result<Dataset> {
    let (cols, d) = columns(benchmark);
    read_csv(path, &cols, d).with_context(|| format!("reading dataset {}", path.display()))
}

/// Header value of a checkpoint, or an error naming the missing key.
fn benchmark_of(c: &Checkpoint) -> Result<Benchmark> {
    c.get("benchmark")?.parse().map_err(|e: String| anyhow!(e))
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, name: &str, trace: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = trace.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]).collect();
    write_rows(path, &["epoch", name], &rows)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let root = &cli.out_root;
    match &cli.command {
        Command::GenData { benchmark, n, seed, sampling, out } => {
            let mut run = RunDir::create(root, "gen-data", *seed)?;
            run.arg("benchmark", json!(benchmark.name()))
                .arg("n", json!(n))
                .arg("sampling", json!(sampling.name()));
            run.begin()?;
            let data = pipeline::generate(*benchmark, *n, *sampling, &mut RngStream::new(*seed, pipeline::streams::TRAIN_DATA))?;
            let path = out.clone().unwrap_or_else(|| run.file("data.csv"));
            write_csv(&data, &path)?;
            let meta = meta_path(&path);
            write_meta(&data, &meta)?;
            run.output(&path);
            run.output(&meta);
            let dir = run.finish()?;
            println!("{}", path.display());
            eprintln!("run directory: {}", dir.display());
        }
        Command::PrintConfig { config } => print!("{}", config.resolve()?.to_text()),
        Command::TrainModel { config, data, out } => {
            let cfg = config.resolve()?;
            let mut run = RunDir::create(root, "train-model", cfg.seed)?;
            run.config(&cfg.to_text()).arg("alpha", json!(cfg.effective_alpha())).arg("method", json!(cfg.method_label()));
            let train_set = match data {
                Some(p) => {
                    run.input(p)?;
                    load_data(p, cfg.benchmark)?
                }
                None => pipeline::datasets(&cfg)?.0,
            };
            run.begin()?;
            let fit = pipeline::fit_model(&cfg, &train_set)?;
            let path = out.clone().unwrap_or_else(|| run.file("model.ckpt"));
            fit.model.checkpoint(&cfg).save(&path)?;
            run.output(&path);
            let trace = run.file("loss_trace.csv");
            let name = if cfg.method == MethodKind::Mlp { "validation_mse" } else { "energy" };
            write_trace(&trace, name, &fit.loss_trace)?;
            run.output(&trace);
            let dir = run.finish()?;
            println!("{}", path.display());
            eprintln!("run directory: {}", dir.display());
        }
        Command::EvalModel { model, data, samples, seed } => {
            let mut run = RunDir::create(root, "eval-model", *seed)?;
            run.input(model)?.input(data)?;
            let c = Checkpoint::load(model)?;
            let benchmark = benchmark_of(&c)?;
            let samples = samples.unwrap_or(ExperimentConfig::defaults(benchmark).eval.samples);
            run.arg("samples", json!(samples));
            run.begin()?;
            let fitted = Fitted::from_checkpoint(&c)?;
            let test = load_data(data, benchmark)?;
            let method = pipeline::method_of(&c);
            let row = pipeline::score(&fitted, &method, *seed, &test, samples)?;
            let path = run.file("metrics.csv");
            write_rows(&path, &ModelRow::HEADER, &[row.record()])?;
            run.output(&path);
            run.finish()?;
            println!("{}", ModelRow::HEADER.join(","));
            println!("{}", row.record().join(","));
        }
        Command::PredictiveDump { model, state, action, samples, seed, out } => {
            let mut run = RunDir::create(root, "predictive-dump", *seed)?;
            run.input(model)?;
            run.arg("state", json!(state)).arg("action", json!(action)).arg("samples", json!(samples));
            run.begin()?;
            let s = State::new(state[0], state[1]);
            let a = Action::new(action[0], action[1]);
            WetChicken::default().check_state(s)?;
            let fitted = Fitted::from_checkpoint(&Checkpoint::load(model)?)?;
            let draws = pipeline::predictive_dump(&fitted, s, a, *samples, *seed)?;
            let path = out.clone().unwrap_or_else(|| run.file("predictive.csv"));
            let rows: Vec<Vec<String>> = draws.iter().map(|(m, t)| vec![m.to_string(), t.to_string()]).collect();
            write_rows(&path, &["model_sample", "truth_sample"], &rows)?;
            run.output(&path);
            run.finish()?;
            println!("{}", path.display());
        }
        Command::TrainPolicy { config, model, data, out } => {
            let cfg = config.resolve()?;
            if cfg.benchmark != Benchmark::WetChicken {
                bail!("policy search is defined for wet-chicken only");
            }
            let mut run = RunDir::create(root, "train-policy", cfg.seed)?;
            run.config(&cfg.to_text()).input(model)?;
            let r = cfg.rollout_config();
            run.arg("horizon", json!(r.horizon))
                .arg("samples", json!(r.samples))
                .arg("learning_rate", json!(r.adam.learning_rate));
            let train_set = match data {
                Some(p) => {
                    run.input(p)?;
                    load_data(p, cfg.benchmark)?
                }
                None => pipeline::datasets(&cfg)?.0,
            };
            run.begin()?;
            let c = Checkpoint::load(model)?;
            let fitted = Fitted::from_checkpoint(&c)?;
            let outcome = pipeline::fit_policy(&cfg, &fitted, &train_set)?;
            let mut pc = pipeline::policy_checkpoint(&outcome.policy, &cfg);
            pc.set("method", pipeline::method_of(&c));
            let path = out.clone().unwrap_or_else(|| run.file("policy.ckpt"));
            pc.save(&path)?;
            run.output(&path);
            let trace = run.file("objective_trace.csv");
            write_trace(&trace, "objective", &outcome.trace)?;
            run.output(&trace);
            let dir = run.finish()?;
            println!("{}", path.display());
            eprintln!("run directory: {}", dir.display());
        }
        Command::EvalPolicy { policy, episodes, steps, seed } => {
            let mut run = RunDir::create(root, "eval-policy", *seed)?;
            run.input(policy)?;
            run.arg("episodes", json!(episodes)).arg("steps", json!(steps));
            run.begin()?;
            let c = Checkpoint::load(policy)?;
            let p = Policy::from_checkpoint(&c)?;
            let ev = pipeline::evaluate(&p, *episodes, *steps, *seed)?;
            let header = ["method", "seed", "mean_reward", "stderr"];
            let row = vec![pipeline::method_of(&c), seed.to_string(), ev.mean.to_string(), ev.stderr.to_string()];
            let path = run.file("policy_metrics.csv");
            write_rows(&path, &header, std::slice::from_ref(&row))?;
            run.output(&path);
            run.finish()?;
            println!("{}", header.join(","));
            println!("{}", row.join(","));
        }
        Command::ReproTables { seeds, config_dir } => repro_tables(root, *seeds, config_dir.as_deref(), cli.workers)?,
    }
    Ok(())
}

/// Rough single-core wall time of `repro-tables` per seed.
pub const RUNTIME_BUDGET: &str = "about 40 min per seed on one laptop core: wet-chicken 4 models + 3 policies \
    ~14 min, toy-bimodal 3 models ~18 min, toy-heteroskedastic 3 models ~8 min";

fn base_configs(config_dir: Option<&Path>) -> Result<Vec<ExperimentConfig>> {
    Benchmark::ALL
        .iter()
        .map(|&b| match config_dir {
            Some(dir) => {
                let path = dir.join(format!("{}.conf", b.name()));
                if !path.is_file() {
                    bail!(
                        "missing {}; write one with `bnnps print-config --benchmark {}` or drop --config-dir",
                        path.display(),
                        b.name()
                    );
                }
                let cfg = ExperimentConfig::parse(&fs::read_to_string(&path)?)
                    .with_context(|| format!("parsing {}", path.display()))?;
                if cfg.benchmark != b {
                    bail!("{} configures {}, expected {}", path.display(), cfg.benchmark, b);
                }
                Ok(cfg)
            }
            None => Ok(ExperimentConfig::defaults(b)),
        })
        .collect()
}

fn variant(base: &ExperimentConfig, method: MethodKind, alpha: f64, seed: u64) -> ExperimentConfig {
    let mut c = base.clone();
    c.method = method;
    c.model.alpha = alpha;
    c.seed = seed;
    c
}

/// Jobs in a fixed order; results land in the same order whatever the
/// number of workers.
fn run_jobs(parent: &Path, jobs: &[(ExperimentConfig, bool)], workers: usize) -> Result<Vec<pipeline::SeedRun>> {
    let next = AtomicUsize::new(0);
    type Slot = Option<Result<pipeline::SeedRun>>;
    let slots: Mutex<Vec<Slot>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cfg, policy)) = jobs.get(i) else { break };
                eprintln!("[{}/{}] {} {} seed {}", i + 1, jobs.len(), cfg.benchmark, cfg.method_label(), cfg.seed);
                let r = run_job(parent, cfg, *policy);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .zip(jobs)
        .map(|(r, (cfg, _))| {
            r.expect("every job ran").with_context(|| format!("{} {} seed {}", cfg.benchmark, cfg.method_label(), cfg.seed))
        })
        .collect()
}

/// One (benchmark, method, seed) job in its own run directory under `parent`.
fn run_job(parent: &Path, cfg: &ExperimentConfig, with_policy: bool) -> Result<pipeline::SeedRun> {
    let label = cfg.method_label().replace('=', "");
    let mut run = RunDir::create(parent, &format!("{}-{label}", cfg.benchmark), cfg.seed)?;
    run.config(&cfg.to_text()).arg("alpha", json!(cfg.effective_alpha())).arg("method", json!(cfg.method_label()));
    run.begin()?;
    let r = pipeline::run_seed(cfg, with_policy)?;
    let model = run.file("model.ckpt");
    r.fitted.checkpoint(cfg).save(&model)?;
    run.output(&model);
    let metrics = run.file("metrics.csv");
    write_rows(&metrics, &ModelRow::HEADER, &[r.model.record()])?;
    run.output(&metrics);
    if let Some((policy, ev)) = &r.policy {
        let path = run.file("policy.ckpt");
        pipeline::policy_checkpoint(policy, cfg).save(&path)?;
        run.output(&path);
        let path = run.file("policy_metrics.csv");
        let row = vec![cfg.method_label(), cfg.seed.to_string(), ev.mean.to_string(), ev.stderr.to_string()];
        write_rows(&path, &["method", "seed", "mean_reward", "stderr"], &[row])?;
        run.output(&path);
    }
    run.finish()?;
    Ok(r)
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn repro_tables(root: &Path, seeds: u64, config_dir: Option<&Path>, workers: usize) -> Result<()> {
    if seeds == 0 {
        bail!("need at least one seed");
    }
    let bases = base_configs(config_dir)?;
    let mut run = RunDir::create(root, "repro-tables", seeds)?;
    for b in &bases {
        run.arg(&format!("config.{}", b.benchmark), json!(b.to_text()));
    }
    run.arg("seeds", json!(seeds)).arg("runtime_budget", json!(RUNTIME_BUDGET));
    run.begin()?;
    println!("# runtime budget: {RUNTIME_BUDGET}");

    let wc = &bases[0];
    let wc_methods = [(MethodKind::Mlp, 0.5), (MethodKind::Vb, 0.5), (MethodKind::Alpha, 0.5), (MethodKind::Alpha, 1.0)];
    let toy_methods = [(MethodKind::Vb, 0.5), (MethodKind::Alpha, 0.5), (MethodKind::Alpha, 1.0)];
    let mut jobs = Vec::new();
    for &(m, a) in &wc_methods {
        for seed in 1..=seeds {
            jobs.push((variant(wc, m, a, seed), true));
        }
    }
    for base in &bases[1..] {
        for &(m, a) in &toy_methods {
            for seed in 1..=seeds {
                jobs.push((variant(base, m, a, seed), false));
            }
        }
    }
    let results = run_jobs(&run.path, &jobs, workers)?;

    let per_seed: Vec<Vec<String>> = jobs
        .iter()
        .zip(&results)
        .map(|((cfg, _), r)| {
            let mut row = vec![cfg.benchmark.to_string()];
            row.extend(r.model.record());
            row.push(r.reward().map_or(String::new(), |v| v.to_string()));
            row
        })
        .collect();
    let path = run.file("runs.csv");
    write_rows(&path, &["benchmark", "method", "seed", "mse", "ll", "mse_y", "ll_y", "mean_reward"], &per_seed)?;
    run.output(&path);

    let group = |bench: Benchmark, label: &str| -> Vec<&pipeline::SeedRun> {
        jobs.iter()
            .zip(&results)
            .filter(|((c, _), _)| c.benchmark == bench && c.method_label() == label)
            .map(|(_, r)| r)
            .collect()
    };
    let labels = |methods: &[(MethodKind, f64)], base: &ExperimentConfig| -> Vec<String> {
        methods.iter().map(|&(m, a)| variant(base, m, a, 1).method_label()).collect()
    };

    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    for label in labels(&wc_methods, wc) {
        let g = group(Benchmark::WetChicken, &label);
        let rewards: Vec<f64> = g.iter().filter_map(|r| r.reward()).collect();
        let (m, se) = mean_and_stderr(&rewards);
        t1.push(vec![label.clone(), fmt(m), fmt(se), rewards.len().to_string()]);
        let (mse, mse_se) = mean_and_stderr(&g.iter().map(|r| r.model.mse_y).collect::<Vec<_>>());
        let (ll, ll_se) = mean_and_stderr(&g.iter().map(|r| r.model.ll_y).collect::<Vec<_>>());
        t2.push(vec![label, fmt(mse), fmt(mse_se), fmt(ll), fmt(ll_se), g.len().to_string()]);
    }
    let p1 = run.file("table1_wetchicken.csv");
    write_rows(&p1, &["method", "mean_reward", "stderr", "runs"], &t1)?;
    let p2 = run.file("table2_wetchicken.csv");
    write_rows(&p2, &["method", "mse_y", "mse_y_stderr", "ll_y", "ll_y_stderr", "runs"], &t2)?;
    run.output(&p1);
    run.output(&p2);

    for (base, name) in bases[1..].iter().zip(["table3.csv", "table4.csv"]) {
        let rows: Vec<Vec<String>> = labels(&toy_methods, base)
            .into_iter()
            .map(|label| {
                let g = group(base.benchmark, &label);
                let (rmse, rmse_se) = mean_and_stderr(&g.iter().map(|r| r.model.mse.sqrt()).collect::<Vec<_>>());
                let (ll, ll_se) = mean_and_stderr(&g.iter().map(|r| r.model.ll).collect::<Vec<_>>());
                vec![label, fmt(rmse), fmt(rmse_se), fmt(ll), fmt(ll_se), g.len().to_string()]
            })
            .collect();
        let p = run.file(name);
        write_rows(&p, &["method", "rmse", "rmse_stderr", "ll", "ll_stderr", "runs"], &rows)?;
        run.output(&p);
    }
    let dir = run.finish()?;
    println!("{}", dir.display());
    Ok(())
}
