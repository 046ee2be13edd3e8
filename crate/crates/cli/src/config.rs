//! Experiment configuration files: `[section]` headers followed by
//! `key = value` lines. `#` starts a comment. Unknown sections and keys are
//! rejected.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use bnnps_core::baselines::MlpConfig;
use bnnps_core::bnn::{ModelHyperparams, NoiseModel, VB_ALPHA};
use bnnps_core::env::Sampling;
use bnnps_core::optim::AdamConfig;
use bnnps_core::policy::RolloutConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self { line: Some(line), message: message.into() }
    }

    fn new(message: impl Into<String>) -> Self {
        Self { line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config line {l}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    WetChicken,
    ToyBimodal,
    ToyHeteroskedastic,
}

impl Benchmark {
    pub const ALL: [Benchmark; 3] = [Benchmark::WetChicken, Benchmark::ToyBimodal, Benchmark::ToyHeteroskedastic];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::WetChicken => "wet-chicken",
            Benchmark::ToyBimodal => "toy-bimodal",
            Benchmark::ToyHeteroskedastic => "toy-heteroskedastic",
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            Benchmark::WetChicken => 4,
            _ => 1,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            Benchmark::WetChicken => 2,
            _ => 1,
        }
    }
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown benchmark {s:?} (expected wet-chicken, toy-bimodal or toy-heteroskedastic)"))
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inference method. `Vb` is alpha-divergence training at `alpha = 1e-6`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Alpha,
    Vb,
    Mlp,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Alpha => "alpha",
            MethodKind::Vb => "vb",
            MethodKind::Mlp => "mlp",
        }
    }
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "alpha" => Ok(MethodKind::Alpha),
            "vb" => Ok(MethodKind::Vb),
            "mlp" => Ok(MethodKind::Mlp),
            _ => Err(format!("unknown method {s:?} (expected alpha, vb or mlp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub sampling: Sampling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub alpha: f64,
    pub hidden: Vec<usize>,
    pub lambda: f64,
    pub gamma: f64,
    pub noise: NoiseModel,
    pub samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub learn_z: bool,
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Predictive samples per test point.
    pub samples: usize,
    pub episodes: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub method: MethodKind,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn defaults(benchmark: Benchmark) -> Self {
        let d = benchmark.input_dim();
        let (n_train, n_test, hidden, noise, learning_rate, learn_z) = match benchmark {
            Benchmark::WetChicken => (2500, 2500, vec![20, 20], NoiseModel::Fixed(1e-5), 0.01, true),
            Benchmark::ToyBimodal => (2500, 5000, vec![50, 50], NoiseModel::Learned { init: 0.1 }, 0.01, false),
            Benchmark::ToyHeteroskedastic => (1000, 5000, vec![50, 50], NoiseModel::Fixed(0.01), 0.002, false),
        };
        Self {
            benchmark,
            method: MethodKind::Alpha,
            seed: 1,
            data: DataConfig { n_train, n_test, sampling: Sampling::Uniform },
            model: ModelConfig {
                alpha: 0.5,
                hidden,
                lambda: 1.0,
                gamma: d as f64,
                noise,
                samples: 50,
                batch_size: 250,
                epochs: 1000,
                learning_rate,
                learn_z,
                validation_fraction: 0.1,
            },
            policy: PolicyConfig { horizon: 5, samples: 20, batch_size: 10, epochs: 100, learning_rate: 1e-5, hidden: vec![20, 20] },
            eval: EvalConfig { samples: if benchmark == Benchmark::WetChicken { 10_000 } else { 100 }, episodes: 10, steps: 1000 },
        }
    }

    /// Alpha actually used for training: the configured value, or the VB
    /// limit for `method = vb`.
    pub fn effective_alpha(&self) -> f64 {
        match self.method {
            MethodKind::Vb => VB_ALPHA,
            _ => self.model.alpha,
        }
    }

    /// Short label used in tables, e.g. `alpha=0.5`, `vb`, `mlp`.
    pub fn method_label(&self) -> String {
        match self.method {
            MethodKind::Alpha => format!("alpha={}", self.model.alpha),
            m => m.name().to_string(),
        }
    }

    pub fn hyperparams(&self) -> ModelHyperparams {
        let m = &self.model;
        ModelHyperparams {
            alpha: self.effective_alpha(),
            lambda: m.lambda,
            gamma: m.gamma,
            noise: m.noise,
            samples: m.samples,
            batch_size: m.batch_size,
            epochs: m.epochs,
            adam: AdamConfig::with_lr(m.learning_rate),
            learn_z: m.learn_z,
        }
    }

    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig {
            hidden: self.model.hidden.clone(),
            batch_size: self.model.batch_size,
            epochs: self.model.epochs,
            adam: AdamConfig::with_lr(self.model.learning_rate),
            validation_fraction: self.model.validation_fraction,
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        let p = &self.policy;
        RolloutConfig {
            horizon: p.horizon,
            samples: p.samples,
            batch_size: p.batch_size,
            epochs: p.epochs,
            adam: AdamConfig::with_lr(p.learning_rate),
            hidden: p.hidden.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(ConfigError::new("data sizes must be positive"));
        }
        if self.method == MethodKind::Mlp && self.data.n_train < 10 {
            return Err(ConfigError::new("the MLP baseline needs at least 10 training rows"));
        }
        self.hyperparams().validate().map_err(|e| ConfigError::new(e.to_string()))?;
        self.rollout_config().validate().map_err(|e| ConfigError::new(e.to_string()))?;
        if self.eval.samples == 0 || self.eval.episodes == 0 || self.eval.steps == 0 {
            return Err(ConfigError::new("eval samples, episodes and steps must be positive"));
        }
        Ok(())
    }

    /// Parses a config file. Omitted keys keep the defaults of the
    /// configured benchmark.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::at(line, format!("malformed section header {content:?}")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::at(line, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::at(line, format!("expected `key = value`, got {content:?}")))?;
            let sec = section.clone().ok_or_else(|| ConfigError::at(line, "key outside of any section"))?;
            entries.push((line, sec, key.trim().to_string(), value.trim().to_string()));
        }

        let mut seen = std::collections::HashSet::new();
        for (line, sec, key, _) in &entries {
            if !seen.insert((sec.clone(), key.clone())) {
                return Err(ConfigError::at(*line, format!("duplicate key {sec}.{key}")));
            }
        }
        let benchmark = match entries.iter().find(|(_, s, k, _)| s == "experiment" && k == "benchmark") {
            Some((line, _, _, v)) => v.parse().map_err(|e: String| ConfigError::at(*line, e))?,
            None => Benchmark::WetChicken,
        };
        let mut cfg = Self::defaults(benchmark);
        // noise kind and value are two keys for one field
        let mut noise_kind = if cfg.model.noise.is_learned() { "learned" } else { "fixed" }.to_string();
        let mut noise_value = cfg.model.noise.initial();
        for (line, sec, key, value) in &entries {
            let e = |m: String| ConfigError::at(*line, format!("{sec}.{key}: {m}"));
            match (sec.as_str(), key.as_str()) {
                ("experiment", "benchmark") => {}
                ("experiment", "method") => cfg.method = value.parse().map_err(e)?,
                ("experiment", "seed") => cfg.seed = num(value).map_err(e)?,
                ("data", "n_train") => cfg.data.n_train = num(value).map_err(e)?,
                ("data", "n_test") => cfg.data.n_test = num(value).map_err(e)?,
                ("data", "sampling") => {
                    cfg.data.sampling =
                        Sampling::parse(value).ok_or_else(|| e(format!("expected uniform or random-walk, got {value:?}")))?
                }
                ("model", "alpha") => cfg.model.alpha = num(value).map_err(e)?,
                ("model", "hidden") => cfg.model.hidden = list(value).map_err(e)?,
                ("model", "lambda") => cfg.model.lambda = num(value).map_err(e)?,
                ("model", "gamma") => cfg.model.gamma = num(value).map_err(e)?,
                ("model", "noise") => match value.as_str() {
                    "learned" | "fixed" => noise_kind = value.clone(),
                    _ => return Err(e(format!("expected learned or fixed, got {value:?}"))),
                },
                ("model", "noise_value") => noise_value = num(value).map_err(e)?,
                ("model", "samples") => cfg.model.samples = num(value).map_err(e)?,
                ("model", "batch_size") => cfg.model.batch_size = num(value).map_err(e)?,
                ("model", "epochs") => cfg.model.epochs = num(value).map_err(e)?,
                ("model", "learning_rate") => cfg.model.learning_rate = num(value).map_err(e)?,
                ("model", "learn_z") => cfg.model.learn_z = num(value).map_err(e)?,
                ("model", "validation_fraction") => cfg.model.validation_fraction = num(value).map_err(e)?,
                ("policy", "horizon") => cfg.policy.horizon = num(value).map_err(e)?,
                ("policy", "samples") => cfg.policy.samples = num(value).map_err(e)?,
                ("policy", "batch_size") => cfg.policy.batch_size = num(value).map_err(e)?,
                ("policy", "epochs") => cfg.policy.epochs = num(value).map_err(e)?,
                ("policy", "learning_rate") => cfg.policy.learning_rate = num(value).map_err(e)?,
                ("policy", "hidden") => cfg.policy.hidden = list(value).map_err(e)?,
                ("eval", "samples") => cfg.eval.samples = num(value).map_err(e)?,
                ("eval", "episodes") => cfg.eval.episodes = num(value).map_err(e)?,
                ("eval", "steps") => cfg.eval.steps = num(value).map_err(e)?,
                _ => return Err(ConfigError::at(*line, format!("unknown key {sec}.{key}"))),
            }
        }
        cfg.model.noise = if noise_kind == "learned" {
            NoiseModel::Learned { init: noise_value }
        } else {
            NoiseModel::Fixed(noise_value)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, in the format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let p = &self.policy;
        let (noise, noise_value) = match m.noise {
            NoiseModel::Learned { init } => ("learned", init),
            NoiseModel::Fixed(v) => ("fixed", v),
        };
        let join = |v: &[usize]| v.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        let _ = write!(
            s,
            "[experiment]\nbenchmark = {}\nmethod = {}\nseed = {}\n\n\
             [data]\nn_train = {}\nn_test = {}\nsampling = {}\n\n\
             [model]\nalpha = {}\nhidden = {}\nlambda = {}\ngamma = {}\nnoise = {noise}\nnoise_value = {noise_value}\n\
             samples = {}\nbatch_size = {}\nepochs = {}\nlearning_rate = {}\nlearn_z = {}\nvalidation_fraction = {}\n\n\
             [policy]\nhorizon = {}\nsamples = {}\nbatch_size = {}\nepochs = {}\nlearning_rate = {}\nhidden = {}\n\n\
             [eval]\nsamples = {}\nepisodes = {}\nsteps = {}\n",
            self.benchmark,
            self.method.name(),
            self.seed,
            self.data.n_train,
            self.data.n_test,
            self.data.sampling.name(),
            m.alpha,
            join(&m.hidden),
            m.lambda,
            m.gamma,
            m.samples,
            m.batch_size,
            m.epochs,
            m.learning_rate,
            m.learn_z,
            m.validation_fraction,
            p.horizon,
            p.samples,
            p.batch_size,
            p.epochs,
            p.learning_rate,
            join(&p.hidden),
            self.eval.samples,
            self.eval.episodes,
            self.eval.steps,
        );
        s
    }
}

const SECTIONS: [&str; 5] = ["experiment", "data", "model", "policy", "eval"];

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn list(v: &str) -> Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(p.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for b in Benchmark::ALL {
            let c = ExperimentConfig::defaults(b);
            assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn benchmark_picks_defaults() {
        let c = ExperimentConfig::parse("[experiment]\nbenchmark = toy-heteroskedastic\n").unwrap();
        assert_eq!(c.data.n_train, 1000);
        assert_eq!(c.model.learning_rate, 0.002);
        assert!(!c.model.learn_z);
    }

    #[test]
    fn vb_maps_to_tiny_alpha() {
        let c = ExperimentConfig::parse("[experiment]\nmethod = vb\n").unwrap();
        assert_eq!(c.hyperparams().alpha, 1e-6);
        assert_eq!(c.method_label(), "vb");
    }

    #[test]
    fn strictness() {
        let bad = [
            "[model]\nalpha_typo = 1\n",
            "[nope]\n",
            "alpha = 1\n",
            "[model]\nalpha\n",
            "[model]\nalpha = x\n",
            "[model]\nalpha = 0.5\nalpha = 0.5\n",
            "[model]\nalpha = 0\n",
            "[model]\nnoise = maybe\n",
        ];
        for text in bad {
            assert!(ExperimentConfig::parse(text).is_err(), "{text:?}");
        }
        let err = ExperimentConfig::parse("[data]\n\nsize = 3\n").unwrap_err();
        assert_eq!(err.line, Some(3));
    }

    #[test]
    fn comments_and_whitespace() {
        let c = ExperimentConfig::parse("# top\n[ model ]  \n  alpha=1.0 # inline\nhidden = 5, 6\n").unwrap();
        assert_eq!(c.model.alpha, 1.0);
        assert_eq!(c.model.hidden, vec![5, 6]);
    }
}
