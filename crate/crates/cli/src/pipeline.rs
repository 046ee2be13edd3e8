//! The experiment steps behind every command: data, model fitting, scoring,
//! policy search and evaluation, with the per-seed stream layout.

use anyhow::{bail, Context, Result};
use bnnps_core::autodiff::Tensor;
use bnnps_core::baselines::{train_mlp, MlpModel};
use bnnps_core::bnn::{test_metrics, train, BnnArchitecture, FittedModel, Metrics};
use bnnps_core::checkpoint::Checkpoint;
use bnnps_core::env::{gen_wet_chicken, toy_bimodal, toy_heteroskedastic, Action, Dataset, Sampling, State, WetChicken};
use bnnps_core::policy::{evaluate_policy, train_policy, Cost, Dynamics, Policy, PolicyEvaluation, PolicyOutcome};
use bnnps_core::rng::RngStream;

use crate::config::{Benchmark, ExperimentConfig, MethodKind};

/// Stream ids under one master seed.
pub mod streams {
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const MODEL: u64 = 3;
    pub const METRICS: u64 = 4;
    pub const POLICY: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const DUMP: u64 = 7;
    pub const TRUTH: u64 = 8;
}

pub fn generate(benchmark: Benchmark, n: usize, sampling: Sampling, stream: &mut RngStream) -> Result<Dataset> {
    Ok(match benchmark {
        Benchmark::WetChicken => gen_wet_chicken(&WetChicken::default(), n, sampling, stream)?,
        Benchmark::ToyBimodal => toy_bimodal(n, stream)?,
        Benchmark::ToyHeteroskedastic => toy_heteroskedastic(n, stream)?,
    })
}

/// Training and test sets of `cfg` for its seed.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train = generate(cfg.benchmark, cfg.data.n_train, cfg.data.sampling, &mut RngStream::new(cfg.seed, streams::TRAIN_DATA))?;
    let test = generate(cfg.benchmark, cfg.data.n_test, cfg.data.sampling, &mut RngStream::new(cfg.seed, streams::TEST_DATA))?;
    Ok((train, test))
}

/// A trained transition or regression model of either kind.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq)]
pub enum Fitted {
    Bnn(FittedModel),
    Mlp(MlpModel),
}

impl Fitted {
    pub fn dynamics(&self) -> &dyn Dynamics {
        match self {
            Fitted::Bnn(m) => m,
            Fitted::Mlp(m) => m,
        }
    }

    pub fn metrics(&self, test: &Dataset, samples: usize, stream: &mut RngStream) -> Result<Metrics> {
        Ok(match self {
            Fitted::Bnn(m) => test_metrics(m, test, samples, stream)?,
            Fitted::Mlp(m) => m.test_metrics(test)?,
        })
    }

    /// Predictive draws at one input row in original units, `[s, K]`.
    pub fn predictive_samples(&self, x: &[f64], s: usize, stream: &mut RngStream) -> Result<Tensor> {
        Ok(match self {
            Fitted::Bnn(m) => m.predictive_samples(x, s, stream)?,
            Fitted::Mlp(m) => m.predictive_samples(x, s, stream)?,
        })
    }

    pub fn checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let mut c = match self {
            Fitted::Bnn(m) => m.to_checkpoint(),
            Fitted::Mlp(m) => m.to_checkpoint(),
        };
        tag(&mut c, cfg);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(match c.kind()? {
            FittedModel::KIND => Fitted::Bnn(FittedModel::from_checkpoint(c)?),
            MlpModel::KIND => Fitted::Mlp(MlpModel::from_checkpoint(c)?),
            other => bail!("checkpoint holds a {other:?}, not a model"),
        })
    }
}

/// Records which experiment produced a checkpoint.
pub fn tag(c: &mut Checkpoint, cfg: &ExperimentConfig) {
    c.set("benchmark", cfg.benchmark);
    c.set("method", cfg.method_label());
    c.set("seed", cfg.seed);
}

pub fn method_of(c: &Checkpoint) -> String {
    c.get("method").map(str::to_string).unwrap_or_else(|_| "unknown".into())
}

pub fn seed_of(c: &Checkpoint) -> Option<u64> {
    c.parse("seed").ok()
}

pub struct ModelFit {
    pub model: Fitted,
    pub loss_trace: Vec<f64>,
}

pub fn fit_model(cfg: &ExperimentConfig, train_set: &Dataset) -> Result<ModelFit> {
    cfg.validate()?;
    let mut stream = RngStream::new(cfg.seed, streams::MODEL);
    if cfg.method == MethodKind::Mlp {
        let out = train_mlp(train_set, &cfg.mlp_config(), true, &mut stream)?;
        return Ok(ModelFit { model: Fitted::Mlp(out.model), loss_trace: out.validation_trace });
    }
    let arch = BnnArchitecture::new(train_set.feature_dim(), cfg.model.hidden.clone(), train_set.target_dim())?;
    let out = train(train_set, &arch, &cfg.hyperparams(), true, &mut stream).context("training the model")?;
    Ok(ModelFit { model: Fitted::Bnn(out.model), loss_trace: out.loss_trace })
}

/// Test scores as one table row.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelRow {
    pub method: String,
    pub seed: u64,
    pub mse: f64,
    pub ll: f64,
    pub mse_y: f64,
    pub ll_y: f64,
}

impl ModelRow {
    pub const HEADER: [&'static str; 6] = ["method", "seed", "mse", "ll", "mse_y", "ll_y"];

    pub fn record(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.seed.to_string(),
            self.mse.to_string(),
            self.ll.to_string(),
            self.mse_y.to_string(),
            self.ll_y.to_string(),
        ]
    }
}

/// Target column reported as "y": `dy` when present, else the first.
pub fn y_column(data: &Dataset) -> usize {
    let k = data.target_dim();
    let names = &data.columns[data.feature_dim()..];
    names.iter().position(|c| c == "dy").filter(|&i| i < k).unwrap_or(0)
}

pub fn score(model: &Fitted, method: &str, seed: u64, test: &Dataset, samples: usize) -> Result<ModelRow> {
    let m = model.metrics(test, samples, &mut RngStream::new(seed, streams::METRICS))?;
    let j = y_column(test);
    Ok(ModelRow { method: method.to_string(), seed, mse: m.mse, ll: m.ll, mse_y: m.mse_dims[j], ll_y: m.ll_dims[j] })
}

/// Start states `[N, 2]` taken from the state columns of transitions.
pub fn start_states(data: &Dataset) -> Result<Tensor> {
    if data.feature_dim() != 4 || data.target_dim() != 2 {
        bail!("policy search needs Wet-Chicken transitions (x, y, ax, ay -> dx, dy)");
    }
    let rows = (0..data.len()).flat_map(|r| data.x.row(r)[..2].to_vec()).collect();
    Ok(Tensor::new(vec![data.len(), 2], rows)?)
}

pub fn fit_policy(cfg: &ExperimentConfig, model: &Fitted, train_set: &Dataset) -> Result<PolicyOutcome> {
    let starts = start_states(train_set)?;
    let env = WetChicken::default();
    let mut stream = RngStream::new(cfg.seed, streams::POLICY);
    Ok(train_policy(model.dynamics(), &starts, &cfg.rollout_config(), Cost::WetChicken { length: env.length }, &mut stream)?)
}

pub fn policy_checkpoint(policy: &Policy, cfg: &ExperimentConfig) -> Checkpoint {
    let mut c = policy.to_checkpoint();
    tag(&mut c, cfg);
    cfg.rollout_config().put(&mut c);
    c
}

pub fn evaluate(policy: &Policy, episodes: usize, steps: usize, seed: u64) -> Result<PolicyEvaluation> {
    Ok(evaluate_policy(policy, &WetChicken::default(), episodes, steps, &RngStream::new(seed, streams::EVAL))?)
}

/// Everything produced for one (method, seed) pair.
pub struct SeedRun {
    pub fitted: Fitted,
    pub model: ModelRow,
    pub policy: Option<(Policy, PolicyEvaluation)>,
}

impl SeedRun {
    pub fn reward(&self) -> Option<f64> {
        self.policy.as_ref().map(|(_, e)| e.mean)
    }
}

/// Data, model, scores and, for Wet-Chicken, the policy.
pub fn run_seed(cfg: &ExperimentConfig, with_policy: bool) -> Result<SeedRun> {
    let (train_set, test_set) = datasets(cfg)?;
    let fit = fit_model(cfg, &train_set)?;
    let model = score(&fit.model, &cfg.method_label(), cfg.seed, &test_set, cfg.eval.samples)?;
    let policy = if with_policy && cfg.benchmark == Benchmark::WetChicken {
        let out = fit_policy(cfg, &fit.model, &train_set)?;
        let ev = evaluate(&out.policy, cfg.eval.episodes, cfg.eval.steps, cfg.seed)?;
        Some((out.policy, ev))
    } else {
        None
    };
    Ok(SeedRun { fitted: fit.model, model, policy })
}

/// Model and true Δy draws at one state-action pair: `(model, truth)`.
pub fn predictive_dump(model: &Fitted, s: State, a: Action, n: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let env = WetChicken::default();
    let draws = model.predictive_samples(&[s.x, s.y, a.ax, a.ay], n, &mut RngStream::new(seed, streams::DUMP))?;
    if draws.cols() != 2 {
        bail!("predictive dump needs a Wet-Chicken model with outputs (dx, dy)");
    }
    let mut truth_stream = RngStream::new(seed, streams::TRUTH);
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let next = env.step_random(s, a, &mut truth_stream)?;
        out.push((draws.row(r)[1], next.y - s.y));
    }
    Ok(out)
}

/// Share of Δy draws that land at the river start instead of continuing.
///
/// Without a fall the next position is at least `y_min`, the `tau = -1`
/// outcome; a draw counts as a reset when `y + dy` is below `y_min / 2`.
pub fn reset_fraction(env: &WetChicken, s: State, a: Action, dy: &[f64]) -> Result<f64> {
    let y_min = env.y_hat(s, a, -1.0).max(0.0);
    if y_min <= 0.0 {
        bail!("state ({}, {}) cannot separate resets from slow drift", s.x, s.y);
    }
    let resets = dy.iter().filter(|&&d| s.y + d < 0.5 * y_min).count();
    Ok(resets as f64 / dy.len().max(1) as f64)
}

/// Shares of toy-bimodal predictive draws at `x` near the sine mode, near the
/// cosine mode, and near their midpoint (each within 2.5).
pub fn toy_populations(draws: &[f64], x: f64) -> Shares {
    let (a, b) = (10.0 * x.sin(), 10.0 * x.cos());
    let mid = 0.5 * (a + b);
    let n = draws.len().max(1) as f64;
    let share = |c: f64| draws.iter().filter(|&&v| (v - c).abs() < 2.5).count() as f64 / n;
    (share(a), share(b), share(mid))
}

/// Two separated populations: each mode holds a quarter of the draws and the
/// gap between them under a tenth.
pub fn is_two_population(shares: Shares) -> bool {
    shares.0 >= 0.25 && shares.1 >= 0.25 && shares.2 < 0.1
}

/// Inputs where the toy modes are at least 9 apart.
pub const TOY_PROBE_X: [f64; 3] = [-1.5, -0.5, 0.0];

/// Population shares (near mode a, near mode b, elsewhere) at one input.
pub type Shares = (f64, f64, f64);

pub fn toy_bimodality(model: &Fitted, draws: usize, seed: u64) -> Result<Vec<(f64, Shares)>> {
    let mut stream = RngStream::new(seed, streams::DUMP);
    TOY_PROBE_X
        .iter()
        .map(|&x| {
            let s = model.predictive_samples(&[x], draws, &mut stream)?;
            Ok((x, toy_populations(s.data(), x)))
        })
        .collect()
}

pub fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_fraction_of_truth_matches_the_fall_probability() {
        let env = WetChicken::default();
        let (s, a) = (State::new(2.5, 4.0), Action::new(0.0, 0.0));
        let mut stream = RngStream::new(1, 0);
        let dy: Vec<f64> = (0..20_000).map(|_| env.step_random(s, a, &mut stream).unwrap().y - s.y).collect();
        let f = reset_fraction(&env, s, a, &dy).unwrap();
        assert!((f - env.fall_probability(s, a)).abs() < 0.015, "{f}");
        assert!((env.fall_probability(s, a) - 0.375).abs() < 1e-12);
    }

    #[test]
    fn population_shares() {
        let draws = [0.0, 0.5, 10.0, 9.0, 5.0];
        let (a, b, m) = toy_populations(&draws, 0.0);
        assert_eq!((a, b, m), (0.4, 0.4, 0.2));
        assert!(!is_two_population((a, b, m)));
        assert!(is_two_population((0.45, 0.45, 0.02)));
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_and_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
