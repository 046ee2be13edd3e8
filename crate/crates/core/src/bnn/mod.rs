//! Bayesian neural networks with a scalar stochastic input per datapoint.
//!
//! The network sees `[x, z]` and predicts `y = f(x, z; W) + e` with
//! `e ~ N(0, diag(noise))`. A factorized Gaussian `q` covers every weight and
//! every training-point disturbance `z_n`; it is fitted by minimizing the
//! black-box alpha energy.

mod energy;
mod predict;
pub(crate) mod train;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn;
use crate::optim::AdamConfig;
use crate::rng::RngStream;

pub use energy::{
    bind, energy_alpha, log_site_w, log_site_z, log_z_prior, log_zq, sample_weights, Batch,
    BoundPosterior, EnergyNoise,
};
pub use predict::{forward, test_metrics, Metrics, NOISE_FLOOR};
pub use train::{train, FittedModel, TrainOutcome};

/// Alpha used to approximate variational Bayes.
pub const VB_ALPHA: f64 = 1e-6;

/// Initial weight log-variance.
pub const INIT_WEIGHT_LOGVAR: f64 = -10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BnnArchitecture {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
}

impl BnnArchitecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "architecture {input_dim} -> {hidden:?} -> {output_dim} has an empty layer"
            )));
        }
        Ok(Self { input_dim, output_dim, hidden })
    }

    /// `(out, in + 1)` per layer; the first layer also sees `z`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        nn::layer_shapes(self.input_dim + 1, &self.hidden, self.output_dim)
    }

    pub fn num_weights(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i).sum()
    }

    pub fn max_width(&self) -> usize {
        self.hidden.iter().copied().chain([self.input_dim + 2, self.output_dim]).max().unwrap_or(1)
    }
}

/// Observation-noise treatment; variances are in normalized target units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseModel {
    Learned { init: f64 },
    Fixed(f64),
}

impl NoiseModel {
    pub fn initial(&self) -> f64 {
        match *self {
            NoiseModel::Learned { init } => init,
            NoiseModel::Fixed(v) => v,
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, NoiseModel::Learned { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelHyperparams {
    pub alpha: f64,
    /// Prior weight variance.
    pub lambda: f64,
    /// Prior disturbance variance.
    pub gamma: f64,
    pub noise: NoiseModel,
    /// Monte-Carlo samples per energy evaluation.
    pub samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Fit `q(z)`; when false it stays at the prior.
    pub learn_z: bool,
}

impl ModelHyperparams {
    /// Defaults for `input_dim` features: `alpha = 0.5`, `lambda = 1`,
    /// `gamma = input_dim`.
    pub fn new(input_dim: usize) -> Self {
        Self {
            alpha: 0.5,
            lambda: 1.0,
            gamma: input_dim as f64,
            noise: NoiseModel::Learned { init: 1.0 },
            samples: 50,
            batch_size: 250,
            epochs: 1000,
            adam: AdamConfig::with_lr(0.01),
            learn_z: true,
        }
    }

    /// Same settings with `alpha` at the variational-Bayes limit.
    pub fn vb_preset(mut self) -> Self {
        self.alpha = VB_ALPHA;
        self
    }

    /// Same settings with `q(z)` held at the prior.
    pub fn freeze_z(mut self) -> Self {
        self.learn_z = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be in (0, 1], got {}; use the VB preset (alpha = {VB_ALPHA:e}) for variational Bayes",
                self.alpha
            )));
        }
        if self.alpha > 1.0 {
            return Err(Error::InvalidArgument(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.lambda > 0.0 && self.gamma > 0.0 && self.noise.initial() > 0.0) {
            return Err(Error::InvalidArgument("lambda, gamma and noise variance must be positive".into()));
        }
        if self.samples == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("samples and batch size must be at least 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Factorized Gaussian over weights and per-row disturbances, stored as
/// means and log-variances.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalPosterior {
    pub w_mean: Vec<Tensor>,
    pub w_logvar: Vec<Tensor>,
    pub z_mean: Tensor,
    pub z_logvar: Tensor,
}

impl VariationalPosterior {
    /// Means `N(0, 1/fan_in)`, weight log-variance `-10`, `q(z_n)` at the prior.
    pub fn init(arch: &BnnArchitecture, n: usize, gamma: f64, stream: &mut RngStream) -> Self {
        let shapes = arch.layer_shapes();
        let w_mean = nn::init_weights(&shapes, stream);
        let w_logvar = shapes.iter().map(|&(o, i)| Tensor::full(&[o, i], INIT_WEIGHT_LOGVAR)).collect();
        Self {
            w_mean,
            w_logvar,
            z_mean: Tensor::zeros(&[n]),
            z_logvar: Tensor::full(&[n], gamma.ln()),
        }
    }

    pub fn num_points(&self) -> usize {
        self.z_mean.len()
    }

    /// Draws `k` weight sets, each layer shaped `[k, out, in + 1]`.
    pub fn draw_weights(&self, k: usize, stream: &mut RngStream) -> Vec<Tensor> {
        self.w_mean
            .iter()
            .zip(&self.w_logvar)
            .map(|(m, lv)| {
                let (o, i) = (m.shape()[0], m.shape()[1]);
                let eps = stream.standard_normal(&[k, o, i]);
                let mut data = eps.into_data();
                for (j, v) in data.iter_mut().enumerate() {
                    let p = j % (o * i);
                    *v = m.data()[p] + (0.5 * lv.data()[p]).exp() * *v;
                }
                Tensor::new(vec![k, o, i], data).expect("shape matches")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_adds_z_input() {
        let a = BnnArchitecture::new(1, vec![50, 50], 1).unwrap();
        assert_eq!(a.layer_shapes(), vec![(50, 3), (50, 51), (1, 51)]);
        assert_eq!(a.num_weights(), 150 + 2550 + 51);
        assert!(BnnArchitecture::new(0, vec![], 1).is_err());
    }

    #[test]
    fn hyperparams_validation() {
        let h = ModelHyperparams::new(4);
        assert_eq!(h.gamma, 4.0);
        h.validate().unwrap();
        let mut bad = h.clone();
        bad.alpha = 0.0;
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("VB preset"), "{msg}");
        let vb = h.clone().vb_preset();
        assert_eq!(vb.alpha, VB_ALPHA);
        assert_eq!(ModelHyperparams { alpha: h.alpha, ..vb }, h);
    }

    #[test]
    fn init_matches_contract() {
        let a = BnnArchitecture::new(2, vec![20], 1).unwrap();
        let q = VariationalPosterior::init(&a, 7, 2.0, &mut RngStream::new(0, 0));
        assert_eq!(q.num_points(), 7);
        assert!(q.z_mean.data().iter().all(|&m| m == 0.0));
        assert!(q.z_logvar.data().iter().all(|&v| v == 2f64.ln()));
        assert!(q.w_logvar.iter().all(|t| t.data().iter().all(|&v| v == INIT_WEIGHT_LOGVAR)));
    }

    #[test]
    fn degenerate_variance_draws_means() {
        let a = BnnArchitecture::new(1, vec![3], 1).unwrap();
        let mut q = VariationalPosterior::init(&a, 1, 1.0, &mut RngStream::new(0, 0));
        for lv in &mut q.w_logvar {
            *lv = lv.map(|_| 1e-30f64.ln());
        }
        let w = q.draw_weights(4, &mut RngStream::new(1, 0));
        for (wl, m) in w.iter().zip(&q.w_mean) {
            for (j, v) in wl.data().iter().enumerate() {
                assert!((v - m.data()[j % m.len()]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn draw_weights_moments() {
        let a = BnnArchitecture::new(1, vec![2], 1).unwrap();
        let mut q = VariationalPosterior::init(&a, 1, 1.0, &mut RngStream::new(0, 0));
        q.w_logvar = q.w_logvar.iter().map(|t| t.map(|_| 0.5f64.ln())).collect();
        let k = 10_000;
        let w = q.draw_weights(k, &mut RngStream::new(2, 0));
        for (wl, m) in w.iter().zip(&q.w_mean) {
            let p = m.len();
            for j in 0..p {
                let mean = (0..k).map(|s| wl.data()[s * p + j]).sum::<f64>() / k as f64;
                let se = (0.5 / k as f64).sqrt();
                assert!((mean - m.data()[j]).abs() < 3.0 * se, "{mean} vs {}", m.data()[j]);
            }
        }
    }
}
